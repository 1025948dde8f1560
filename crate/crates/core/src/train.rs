//! Mini-batch SGD with heavy-ball momentum, a finite-difference Jacobian
//! penalty, per-step nonnegativity projection and threshold balancing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::FeatureConvexClassifier;
use crate::class::{require_both_classes, Class};
use crate::data::{augment_pad_crop, Dataset};
use crate::error::{Error, Result};
use crate::featuremap::FeatureMap;
use crate::icnn::{record, IcnnParams, IcnnSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// the trained weights, do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay_gamma: f64,
    pub jacobian_lambda: f64,
    pub jacobian_fd_step: f64,
    pub seed: u64,
    pub augment: bool,
    /// Zero padding used by pad-and-crop augmentation.
    pub augment_pad: usize,
    /// Fraction of each class held out to choose the threshold.
    /// With 0 the threshold is balanced on the training data.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.001,
            momentum: 0.9,
            lr_decay_gamma: 0.99,
            jacobian_lambda: 0.01,
            jacobian_fd_step: 0.01,
            seed: 0,
            augment: false,
            augment_pad: 1,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return bad("lr_decay_gamma must lie in (0, 1]");
        }
        if !(self.jacobian_lambda >= 0.0 && self.jacobian_lambda.is_finite()) {
            return bad("jacobian_lambda must be nonnegative");
        }
        if !(self.jacobian_fd_step > 0.0 && self.jacobian_fd_step.is_finite()) {
            return bad("jacobian_fd_step must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_balanced_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for rec in &self.epochs {
            w.serialize(rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

/// Numerically stable binary cross entropy on a logit.
pub fn bce_loss(logit: f32, label: Class) -> f64 {
    let s = logit as f64;
    match label {
        Class::Sensitive => softplus(-s),
        Class::Other => softplus(s),
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`bce_loss`] with respect to the logit.
fn bce_grad(logit: f32, label: Class) -> f64 {
    let p = sigmoid(logit as f64);
    match label {
        Class::Sensitive => p - 1.0,
        Class::Other => p,
    }
}

fn unit_direction<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.iter().map(|a| (a / n) as f32).collect();
        }
    }
}

fn shifted(z: &Tensor, u: &[f32], step: f64) -> Tensor {
    let step = step as f32;
    Tensor::from_parts(
        z.shape().to_vec(),
        z.data().iter().zip(u).map(|(&a, &b)| a + step * b).collect(),
    )
}

/// Single-draw estimate `q·((g(z+εu) − g(z))/ε)²` of `‖∇g(z)‖₂²`, with
/// `z = φ(x)` and `u` uniform on the unit sphere of the feature space.
pub fn jacobian_penalty<R: Rng + ?Sized>(
    clf: &FeatureConvexClassifier,
    x: &Tensor,
    fd_step: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(Error::Config("jacobian_fd_step must be positive".into()));
    }
    let z = clf.feature_map().apply(x)?;
    let q = z.len();
    let u = unit_direction(q, rng);
    let g0 = clf.icnn().forward(&z)? as f64;
    let g1 = clf.icnn().forward(&shifted(&z, &u, fd_step))? as f64;
    let d = (g1 - g0) / fd_step;
    Ok(q as f64 * d * d)
}

/// Positive rates at threshold shift `tau`: `(α₁, α₂)`, the fractions of
/// class-1 samples predicted 1 and of class-2 samples predicted 2.
pub fn rates_at(logits: &[f32], labels: &[Class], tau: f32) -> Result<(f64, f64)> {
    check_logits(logits, labels)?;
    let (mut n1, mut n2, mut hit1, mut hit2) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &c) in logits.iter().zip(labels) {
        let pred = Class::from_shifted_logit(s + tau);
        match c {
            Class::Sensitive => {
                n1 += 1;
                hit1 += (pred == Class::Sensitive) as usize;
            }
            Class::Other => {
                n2 += 1;
                hit2 += (pred == Class::Other) as usize;
            }
        }
    }
    Ok((hit1 as f64 / n1 as f64, hit2 as f64 / n2 as f64))
}

fn check_logits(logits: &[f32], labels: &[Class]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    require_both_classes(labels, "threshold balancing")
}

/// Candidate shifts: the negated midpoints between consecutive distinct
/// logits, plus one shift below and one above every logit. Ascending.
pub fn candidate_shifts(logits: &[f32]) -> Vec<f32> {
    let mut s: Vec<f32> = logits.to_vec();
    s.sort_by(f32::total_cmp);
    s.dedup();
    let (lo, hi) = (s[0], s[s.len() - 1]);
    // cut points c; a sample is predicted 1 iff logit > c
    let mut cuts = Vec::with_capacity(s.len() + 1);
    cuts.push(lo as f64 - (lo.abs() as f64).max(1.0));
    cuts.extend(s.windows(2).map(|w| 0.5 * (w[0] as f64 + w[1] as f64)));
    cuts.push(hi as f64 + (hi.abs() as f64).max(1.0));
    let mut taus: Vec<f32> = cuts.iter().rev().map(|&c| -(c as f32)).collect();
    taus.dedup();
    taus
}

/// Shift τ minimising `|α₁(τ) − α₂(τ)|` over [`candidate_shifts`]; ties go
/// to the larger τ.
pub fn balance_threshold(logits: &[f32], labels: &[Class]) -> Result<f32> {
    check_logits(logits, labels)?;
    let mut pos: Vec<f32> = Vec::new();
    let mut neg: Vec<f32> = Vec::new();
    for (&s, &c) in logits.iter().zip(labels) {
        match c {
            Class::Sensitive => pos.push(s),
            Class::Other => neg.push(s),
        }
    }
    pos.sort_by(f32::total_cmp);
    neg.sort_by(f32::total_cmp);
    let (n1, n2) = (pos.len() as i128, neg.len() as i128);

    let mut best: Option<(i128, f32)> = None;
    for tau in candidate_shifts(logits) {
        // `s + τ > 0` is monotone in s, so each class splits at one index.
        let predicted_two = |v: &[f32]| v.partition_point(|&s| s + tau <= 0.0) as i128;
        let hit1 = n1 - predicted_two(&pos);
        let hit2 = predicted_two(&neg);
        let gap = (hit1 * n2 - hit2 * n1).abs();
        if best.is_none_or(|(g, _)| gap <= g) {
            best = Some((gap, tau));
        }
    }
    Ok(best.expect("at least two candidates").1)
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Tensor>,
}

fn add_into(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b);
    }
}

/// Parameter gradient of `BCE(g(z)) + λ·q·((g(z+εu) − g(z))/ε)²` for one
/// sample, using one tape with two forward passes over shared parameters.
fn sample_gradient(
    icnn: &IcnnParams,
    z: &Tensor,
    probe: Option<&Tensor>,
    label: Class,
    cfg: &TrainConfig,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let ids = icnn.add_to_tape(&mut tape, true);
    let zid = tape.constant_ref(z);
    let g0 = record(&mut tape, zid, &ids)?;
    let s0 = tape.value(g0).item()?;
    let mut loss = bce_loss(s0, label);
    let mut seeds = vec![(g0, bce_grad(s0, label))];
    if let Some(zp) = probe {
        let pid = tape.constant_ref(zp);
        let g1 = record(&mut tape, pid, &ids)?;
        let s1 = tape.value(g1).item()?;
        let q = z.len() as f64;
        let eps = cfg.jacobian_fd_step;
        let d = (s1 as f64 - s0 as f64) / eps;
        loss += cfg.jacobian_lambda * q * d * d;
        let c = cfg.jacobian_lambda * 2.0 * q * d / eps;
        seeds[0].1 -= c;
        seeds.push((g1, c));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("training loss diverged".into()));
    }
    let seeds: Vec<_> = seeds.into_iter().map(|(id, s)| (id, s as f32)).collect();
    let grads = tape.gradient_multi(&seeds)?;
    let mut out = Vec::with_capacity(ids.len() * 3);
    for (layer, l) in ids.iter().zip(icnn.layers()) {
        out.push(grads.wrt_or_zeros(layer.a, l.a.shape()));
        out.push(grads.wrt_or_zeros(layer.b, l.b.shape()));
        if let (Some(c), Some(ct)) = (layer.c, &l.c) {
            out.push(grads.wrt_or_zeros(c, ct.shape()));
        }
    }
    Ok(SampleGrad { loss, grads: out })
}

fn logits_of(clf: &FeatureConvexClassifier, inputs: &[Tensor]) -> Result<Vec<f32>> {
    inputs.par_iter().map(|x| clf.logit(x)).collect()
}

fn balanced_accuracy(logits: &[f32], labels: &[Class]) -> Result<(f32, f64)> {
    let tau = balance_threshold(logits, labels)?;
    let (a1, a2) = rates_at(logits, labels, tau)?;
    Ok((tau, 0.5 * (a1 + a2)))
}

/// Trains a classifier and balances its threshold on the held-out split
/// (or on the training data when `val_fraction` is 0).
pub fn train(
    spec: &IcnnSpec,
    feature_map: FeatureMap,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(FeatureConvexClassifier, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    dataset.require_both_classes()?;
    if feature_map.input_dim() != dataset.dim() || spec.input_dim != feature_map.output_dim() {
        return Err(Error::Shape {
            context: "training dimensions (data, feature map, network)",
            expected: vec![dataset.dim(), feature_map.output_dim()],
            actual: vec![feature_map.input_dim(), spec.input_dim],
        });
    }
    let (train_set, val_set) = if config.val_fraction > 0.0 {
        let (t, v) = dataset.split_stratified(config.val_fraction, config.seed)?;
        if require_both_classes(&v.labels, "validation split").is_ok() {
            (t, v)
        } else {
            (dataset.clone(), dataset.clone())
        }
    } else {
        (dataset.clone(), dataset.clone())
    };

    let mut clf = FeatureConvexClassifier::new(feature_map, IcnnParams::init(spec)?, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Tensor> = clf.icnn().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut lr = config.learning_rate;
    let mut history = TrainHistory::default();
    let use_penalty = config.jacobian_lambda > 0.0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            // all randomness is drawn serially so results are thread-count independent
            let mut work = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = match (config.augment, train_set.image_shape) {
                    (true, Some((h, w))) => augment_pad_crop(&train_set.inputs[i], h, w, config.augment_pad, &mut rng)?,
                    _ => train_set.inputs[i].clone(),
                };
                let z = clf.feature_map().apply(&x)?;
                let probe = use_penalty.then(|| {
                    let u = unit_direction(z.len(), &mut rng);
                    shifted(&z, &u, config.jacobian_fd_step)
                });
                work.push((z, probe, train_set.labels[i]));
            }
            let icnn = clf.icnn();
            let partials = work
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut acc: Option<SampleGrad> = None;
                    for (z, probe, label) in chunk {
                        let g = sample_gradient(icnn, z, probe.as_ref(), *label, config)?;
                        match acc.as_mut() {
                            None => acc = Some(g),
                            Some(a) => {
                                a.loss += g.loss;
                                add_into(&mut a.grads, &g.grads);
                            }
                        }
                    }
                    Ok(acc.expect("chunks are nonempty"))
                })
                .collect::<Result<Vec<SampleGrad>>>()?;
            let mut partials = partials.into_iter();
            let mut total = partials.next().expect("batch is nonempty");
            for p in partials {
                total.loss += p.loss;
                add_into(&mut total.grads, &p.grads);
            }
            loss_sum += total.loss;

            let inv_b = 1.0 / batch.len() as f32;
            let (mu, step) = (config.momentum as f32, lr as f32);
            let mut icnn = clf.icnn().clone();
            for ((theta, v), g) in icnn.tensors_mut().into_iter().zip(&mut velocity).zip(&total.grads) {
                for ((t, vv), &gg) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = mu * *vv + gg * inv_b;
                    *t -= step * *vv;
                }
            }
            icnn.project_nonnegative();
            if icnn.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!("parameters became non-finite in epoch {}", epoch + 1)));
            }
            clf = clf.with_icnn(icnn)?;
        }

        let train_logits = logits_of(&clf, &train_set.inputs)?;
        let (train_acc, _) = {
            let (a1, a2) = rates_at(&train_logits, &train_set.labels, 0.0)?;
            let n1 = train_set.count(Class::Sensitive) as f64;
            let n2 = train_set.count(Class::Other) as f64;
            ((a1 * n1 + a2 * n2) / (n1 + n2), ())
        };
        let val_logits = logits_of(&clf, &val_set.inputs)?;
        let (_, val_bal) = balanced_accuracy(&val_logits, &val_set.labels)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_balanced_acc: val_bal,
            lr,
        });
        lr *= config.lr_decay_gamma;
    }

    let val_logits = logits_of(&clf, &val_set.inputs)?;
    let tau = balance_threshold(&val_logits, &val_set.labels)?;
    clf.set_tau(tau);
    Ok((clf, history))
}
