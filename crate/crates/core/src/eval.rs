//! Clean accuracies, certified-accuracy curves, the threshold/radius
//! robustness surface and a PGD attack used to audit certificates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{radius_from_parts, FeatureConvexClassifier};
use crate::class::Class;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::norm::Norm;
use crate::tensor::Tensor;
use crate::train::rates_at;

/// `(α₁, α₂)` at the classifier's own threshold.
pub fn clean_accuracies(clf: &FeatureConvexClassifier, dataset: &Dataset) -> Result<(f64, f64)> {
    dataset.require_both_classes()?;
    let logits: Vec<f32> = dataset.inputs.par_iter().map(|x| clf.logit(x)).collect::<Result<_>>()?;
    rates_at(&logits, &dataset.labels, clf.tau())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: f64,
    pub certified_accuracy: f64,
}

/// `n` evenly spaced radii from 0 to `max`.
pub fn radius_grid(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.first() != Some(&0.0) {
        return Err(Error::Config("radius grid must start at 0".into()));
    }
    if radii.windows(2).any(|w| !(w[0] <= w[1])) || radii.iter().any(|r| r.is_nan()) {
        return Err(Error::Config("radius grid must be sorted ascending".into()));
    }
    Ok(())
}

/// Per-sample logit and `Lip_p(φ)·‖∇g‖_{p,*}`: everything a radius needs
/// that does not depend on the threshold shift.
#[derive(Clone, Copy, Debug)]
struct RadiusParts {
    logit: f32,
    lipschitz: f64,
    dual_norm: f64,
}

impl RadiusParts {
    fn radius(&self, tau: f32) -> f64 {
        radius_from_parts(self.logit + tau, self.lipschitz, self.dual_norm)
    }
}

fn sensitive_parts(clf: &FeatureConvexClassifier, dataset: &Dataset, p: Norm) -> Result<Vec<RadiusParts>> {
    dataset.require_both_classes()?;
    dataset
        .inputs_of(Class::Sensitive)
        .par_iter()
        .map(|x| {
            let z = clf.feature_map().apply(x)?;
            let (logit, grad) = clf.icnn().input_gradient(&z)?;
            if !logit.is_finite() || !grad.is_finite() {
                return Err(Error::Numeric("non-finite logit or gradient".into()));
            }
            Ok(RadiusParts {
                logit,
                lipschitz: clf.feature_map().lipschitz(p),
                dual_norm: p.dual_norm(grad.data()),
            })
        })
        .collect()
}

fn curve_from_radii(radii_of_samples: &[f64], grid: &[f64]) -> Vec<CurvePoint> {
    let n = radii_of_samples.len() as f64;
    grid.iter()
        .map(|&r| CurvePoint {
            radius: r,
            // radius is exactly 0 iff the sample is predicted class 2
            certified_accuracy: radii_of_samples.iter().filter(|&&s| s > 0.0 && s >= r).count() as f64 / n,
        })
        .collect()
}

fn sample_radii(parts: &[RadiusParts], tau: f32) -> Vec<f64> {
    parts.iter().map(|p| p.radius(tau)).collect()
}

/// `Γ(r, τ)` over `radii` for the classifier's current τ.
pub fn certified_accuracy_curve(
    clf: &FeatureConvexClassifier,
    dataset: &Dataset,
    p: Norm,
    radii: &[f64],
) -> Result<Vec<CurvePoint>> {
    check_radii(radii)?;
    let parts = sensitive_parts(clf, dataset, p)?;
    Ok(curve_from_radii(&sample_radii(&parts, clf.tau()), radii))
}

/// Certified `p`-radius of every class-1 sample at the current τ (0 for
/// samples predicted class 2).
pub fn sensitive_radii(clf: &FeatureConvexClassifier, dataset: &Dataset, p: Norm) -> Result<Vec<f64>> {
    let parts = sensitive_parts(clf, dataset, p)?;
    Ok(sample_radii(&parts, clf.tau()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub tau: f32,
    pub alpha1: f64,
    pub alpha2: f64,
    pub curve: Vec<CurvePoint>,
}

impl SurfaceRow {
    pub fn accuracy_gap(&self) -> f64 {
        self.alpha1 - self.alpha2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub norm: Norm,
    pub rows: Vec<SurfaceRow>,
}

/// Shifts `−q_k` for `n` evenly spaced quantiles `q_k` of `logits`, so each
/// shift moves the decision cut through the data. Ascending, deduplicated.
pub fn tau_grid_from_quantiles(logits: &[f32], n: usize) -> Result<Vec<f32>> {
    if logits.is_empty() || n == 0 {
        return Err(Error::Config("quantile grid needs logits and at least one level".into()));
    }
    let mut s = logits.to_vec();
    s.sort_by(f32::total_cmp);
    let last = (s.len() - 1) as f64;
    let mut taus: Vec<f32> = (0..n)
        .map(|k| {
            let q = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
            -s[(q * last).round() as usize]
        })
        .collect();
    taus.sort_by(f32::total_cmp);
    taus.dedup();
    Ok(taus)
}

/// `Γ(r, τ)`, `α₁(τ)` and `α₂(τ)` for every τ in `tau_grid`. Only the
/// threshold moves; network weights are shared by every row.
pub fn robustness_surface(
    clf: &FeatureConvexClassifier,
    dataset: &Dataset,
    p: Norm,
    tau_grid: &[f32],
    radii: &[f64],
) -> Result<SurfaceGrid> {
    check_radii(radii)?;
    if tau_grid.windows(2).any(|w| !(w[0] <= w[1])) || tau_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("tau grid must be finite and sorted ascending".into()));
    }
    let parts = sensitive_parts(clf, dataset, p)?;
    let logits: Vec<f32> = dataset.inputs.par_iter().map(|x| clf.logit(x)).collect::<Result<_>>()?;
    let rows = tau_grid
        .par_iter()
        .map(|&tau| {
            let (alpha1, alpha2) = rates_at(&logits, &dataset.labels, tau)?;
            Ok(SurfaceRow {
                tau,
                alpha1,
                alpha2,
                curve: curve_from_radii(&sample_radii(&parts, tau), radii),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceGrid { norm: p, rows })
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for pt in curve {
        w.serialize(pt)?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}

pub fn write_surface_csv<W: Write>(out: W, grid: &SurfaceGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "alpha1", "alpha2", "radius", "certified_accuracy"])?;
    for row in &grid.rows {
        for pt in &row.curve {
            w.write_record([
                row.tau.to_string(),
                row.alpha1.to_string(),
                row.alpha2.to_string(),
                pt.radius.to_string(),
                pt.certified_accuracy.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<surface csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Defaults to `2.5 · budget / steps`.
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 50,
            restarts: 5,
            step_size: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    /// Flipping perturbation when `success`.
    pub delta: Option<Tensor>,
    pub delta_norm: f64,
    /// Gradient steps taken over all restarts.
    pub steps_used: usize,
}

impl AttackResult {
    fn failed(steps_used: usize) -> Self {
        AttackResult {
            success: false,
            delta: None,
            delta_norm: 0.0,
            steps_used,
        }
    }
}

/// Euclidean projection of `v` onto the `p`-ball of radius `budget`.
pub fn project_ball(v: &mut [f32], p: Norm, budget: f64) {
    match p {
        Norm::Linf => {
            let b = budget as f32;
            for a in v.iter_mut() {
                *a = a.clamp(-b, b);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of_f32(v);
            if n > budget {
                let s = (budget / n) as f32;
                for a in v.iter_mut() {
                    *a *= s;
                }
            }
        }
        Norm::L1 => {
            if Norm::L1.of_f32(v) <= budget {
                return;
            }
            let theta = simplex_threshold(v, budget);
            for a in v.iter_mut() {
                let m = (a.abs() as f64 - theta).max(0.0) as f32;
                *a = m.copysign(*a);
            }
        }
    }
    // rounding in f32 can leave the norm a hair above the budget
    let mut n = p.of_f32(v);
    while n > budget {
        let s = (budget / n * (1.0 - 1e-6)) as f32;
        for a in v.iter_mut() {
            *a *= s;
        }
        n = p.of_f32(v);
    }
}

/// Soft-threshold θ with `Σ max(|v_i| − θ, 0) = budget` (sort-based).
fn simplex_threshold(v: &[f32], budget: f64) -> f64 {
    let mut m: Vec<f64> = v.iter().map(|a| a.abs() as f64).collect();
    m.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &mk) in m.iter().enumerate() {
        cum += mk;
        let t = (cum - budget) / (k + 1) as f64;
        if mk > t {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Steepest-descent direction of unit `p`-norm for a linear decrease along `-grad`.
fn descent_direction(grad: &[f32], p: Norm) -> Vec<f32> {
    let mut d = vec![0.0f32; grad.len()];
    match p {
        Norm::Linf => {
            for (di, &g) in d.iter_mut().zip(grad) {
                *di = if g > 0.0 {
                    -1.0
                } else if g < 0.0 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of_f32(grad);
            if n > 0.0 {
                for (di, &g) in d.iter_mut().zip(grad) {
                    *di = (-(g as f64) / n) as f32;
                }
            }
        }
        Norm::L1 => {
            let k = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k);
            if let Some(k) = k {
                if grad[k] != 0.0 {
                    d[k] = -grad[k].signum();
                }
            }
        }
    }
    d
}

fn random_in_ball<R: Rng + ?Sized>(n: usize, p: Norm, budget: f64, rng: &mut R) -> Vec<f32> {
    let mut v: Vec<f32> = match p {
        Norm::Linf => (0..n).map(|_| (budget * (2.0 * rng.random::<f64>() - 1.0)) as f32).collect(),
        _ => {
            let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let norm = p.of(g.iter().copied()).max(1e-300);
            let r = budget * rng.random::<f64>();
            g.iter().map(|a| (a / norm * r) as f32).collect()
        }
    };
    project_ball(&mut v, p, budget);
    v
}

fn flipped(clf: &FeatureConvexClassifier, x: &Tensor, delta: &[f32]) -> Result<Option<Tensor>> {
    let xp = Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(delta).map(|(a, b)| a + b).collect());
    Ok((clf.predict(&xp)? == Class::Other).then(|| Tensor::from_parts(x.shape().to_vec(), delta.to_vec())))
}

/// Projected gradient descent on the shifted logit inside the `p`-ball of
/// radius `budget` around `x`. The first restart starts at `x`; later ones
/// start at a random point of the ball. Inputs are not clipped to a box.
pub fn pgd_attack(
    clf: &FeatureConvexClassifier,
    x: &Tensor,
    p: Norm,
    budget: f64,
    config: &AttackConfig,
) -> Result<AttackResult> {
    x.expect_vector(clf.input_dim(), "attack input")?;
    if clf.predict(x)? != Class::Sensitive {
        return Err(Error::Contract("attack start point is not predicted class 1".into()));
    }
    if !(budget > 0.0) {
        return Ok(AttackResult::failed(0));
    }
    let step = config.step_size.unwrap_or(2.5 * budget / config.steps.max(1) as f64) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used = 0;
    for restart in 0..config.restarts.max(1) {
        let mut delta = if restart == 0 {
            vec![0.0f32; x.len()]
        } else {
            random_in_ball(x.len(), p, budget, &mut rng)
        };
        for _ in 0..config.steps {
            let xp = Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(&delta).map(|(a, b)| a + b).collect());
            let (s, grad) = clf.shifted_logit_and_input_grad(&xp)?;
            if s <= 0.0 {
                break;
            }
            used += 1;
            let d = descent_direction(grad.data(), p);
            for (a, di) in delta.iter_mut().zip(d) {
                *a += step * di;
            }
            project_ball(&mut delta, p, budget);
        }
        if let Some(found) = flipped(clf, x, &delta)? {
            let delta_norm = p.of_f32(found.data());
            return Ok(AttackResult {
                success: true,
                delta: Some(found),
                delta_norm,
                steps_used: used,
            });
        }
    }
    Ok(AttackResult::failed(used))
}
