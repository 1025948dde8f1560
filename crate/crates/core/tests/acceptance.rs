//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p convexcert --test acceptance`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{balance_oracle, random_icnn, random_vector};
use convexcert::data::{load_idx_dir, make_ring, select_pair, Dataset, RingSpec, Split};
use convexcert::eval::{certified_accuracy_curve, pgd_attack, radius_grid, sensitive_radii, write_curve_csv, AttackConfig};
use convexcert::gradcheck::grad_check;
use convexcert::icnn::IcnnGraph;
use convexcert::model_io::{load_classifier, save_classifier};
use convexcert::separability::{is_convexly_separable, mc_separability, points_from_tensors};
use convexcert::train::{balance_threshold, rates_at, train, TrainConfig};
use convexcert::{Class, FeatureConvexClassifier, FeatureMap, IcnnParams, IcnnSpec, Norm, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Pinned after the first seeded run (observed 0.929 and 6.45).
const MIN_BALANCED_ACCURACY: f64 = 0.90;
const MIN_MEDIAN_L1_RADIUS: f64 = 0.1;

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Mnist {
    clf: FeatureConvexClassifier,
    test: Dataset,
    /// τ balanced on the test split.
    tau_test: f32,
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn train_mnist() -> Mnist {
    let train_raw = load_idx_dir(data_dir(), Split::Train).unwrap();
    let test_raw = load_idx_dir(data_dir(), Split::Test).unwrap();
    let ds = select_pair(&train_raw, 3, 8, Split::Train).unwrap();
    let test = select_pair(&test_raw, 3, 8, Split::Test).unwrap();
    let phi = FeatureMap::concat_from_data(&ds.inputs, 1).unwrap();
    let spec = IcnnSpec::new(phi.output_dim(), vec![200, 50], true, 0).unwrap();
    let t = Instant::now();
    let (clf, _) = train(&spec, phi, &ds, &TrainConfig::default()).unwrap();
    eprintln!(
        "trained MNIST 3-8 on {} samples in {:.1}s; {} test samples",
        ds.len(),
        t.elapsed().as_secs_f64(),
        test.len()
    );
    let logits = test_logits(&clf, &test);
    let tau_test = balance_threshold(&logits, &test.labels).unwrap();
    Mnist { clf, test, tau_test }
}

fn test_logits(clf: &FeatureConvexClassifier, ds: &Dataset) -> Vec<f32> {
    ds.inputs.par_iter().map(|x| clf.logit(x).unwrap()).collect()
}

fn soundness(m: &Mnist) -> Outcome {
    let clf = m.clf.with_tau(m.tau_test);
    let certified: Vec<&Tensor> = m
        .test
        .inputs
        .iter()
        .filter(|x| clf.predict(x).unwrap() == Class::Sensitive)
        .collect();
    let config = AttackConfig { steps: 50, restarts: 5, ..AttackConfig::default() };
    let mut flips = 0usize;
    let mut tried = 0usize;
    for p in Norm::ALL {
        let results: Vec<bool> = certified
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let r = clf.certify(x, &[p]).unwrap().radius(p).unwrap();
                let budget = if r.is_finite() { 0.999 * r } else { 1e3 };
                let cfg = AttackConfig { seed: i as u64, ..config.clone() };
                pgd_attack(&clf, x, p, budget, &cfg).unwrap().success
            })
            .collect();
        tried += results.len();
        flips += results.iter().filter(|&&s| s).count();
    }
    outcome(
        certified.len() >= 200 && flips == 0,
        format!("{} certified points x 3 norms, {tried} attacks, {flips} flips", certified.len()),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut failed = 0;
    let mut checked = 0;
    let mut excluded = 0;
    for _ in 0..100 {
        let depth = rng.random_range(2..=4);
        let hidden: Vec<usize> = (0..depth - 1).map(|_| rng.random_range(1..=256)).collect();
        let q = rng.random_range(1..=64);
        let passthrough = rng.random();
        let params = random_icnn(&mut rng, q, &hidden, passthrough);
        let z = random_vector(&mut rng, q, -1.0, 1.0);
        let graph = IcnnGraph::new(params.spec().clone());
        let report = grad_check(&graph, &IcnnGraph::inputs(&params, &z), 1e-4, 1e-3).unwrap();
        worst = worst.max(report.max_error);
        failed += usize::from(!report.pass);
        checked += report.inputs.iter().map(|c| c.checked).sum::<usize>();
        excluded += report.excluded;
    }
    outcome(
        failed == 0,
        format!("100 ICNNs, {checked} coordinates checked ({excluded} at kinks skipped), max rel err {worst:.2e}"),
    )
}

fn convexity(models: &[(&str, &IcnnParams, Vec<Tensor>)]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for (_, g, pool) in models {
        let pick = |rng: &mut ChaCha8Rng| pool[rng.random_range(0..pool.len())].clone();
        for _ in 0..10_000 {
            let (x, y) = (pick(&mut rng), pick(&mut rng));
            let t: f32 = rng.random();
            let mid = Tensor::vector(x.data().iter().zip(y.data()).map(|(&a, &b)| t * a + (1.0 - t) * b).collect()).unwrap();
            let gx = g.forward(&x).unwrap() as f64;
            let gy = g.forward(&y).unwrap() as f64;
            let rhs = t as f64 * gx + (1.0 - t as f64) * gy;
            let excess = g.forward(&mid).unwrap() as f64 - rhs - 1e-5 * (1.0 + rhs.abs());
            worst = worst.max(excess);
            violations += usize::from(excess > 0.0);

            let (gx32, grad) = g.input_gradient(&x).unwrap();
            let lin: f64 = grad.data().iter().zip(y.data().iter().zip(x.data())).map(|(&d, (&a, &b))| d as f64 * (a - b) as f64).sum();
            let rhs = gx32 as f64 + lin;
            let excess = rhs - gy - 1e-5 * (1.0 + rhs.abs());
            worst = worst.max(excess);
            violations += usize::from(excess > 0.0);
        }
    }
    let names: Vec<&str> = models.iter().map(|m| m.0).collect();
    outcome(
        violations == 0,
        format!(
            "{} models ({}), 2x10^4 checks each, {violations} violations, worst slack {worst:.2e}",
            models.len(),
            names.join(", ")
        ),
    )
}

fn bound_vs_monte_carlo() -> Outcome {
    let t = Instant::now();
    let mut bad = Vec::new();
    for m in 1..=3 {
        for n in 1..=3 {
            for d in 1..=6 {
                let s = mc_separability(m, n, d, 2000, 17).unwrap();
                let ok = if d >= m + n {
                    s.frequency == 1.0
                } else {
                    s.frequency >= s.bound - 3.0 * s.standard_error()
                };
                if !ok {
                    bad.push(format!("({m},{n},{d}) freq {} bound {:.4}", s.frequency, s.bound));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("54 cells x 2000 trials in {:.2}s; failures: {:?}", t.elapsed().as_secs_f64(), bad),
    )
}

fn ring() -> Outcome {
    let t = Instant::now();
    let ds = make_ring(&RingSpec::default()).unwrap();
    let cfg = TrainConfig { epochs: 50, learning_rate: 0.01, batch_size: 16, val_fraction: 0.0, ..TrainConfig::default() };
    let fit = |phi: FeatureMap| {
        let spec = IcnnSpec::new(phi.output_dim(), vec![200, 50], true, 0).unwrap();
        train(&spec, phi, &ds, &cfg).unwrap().0
    };
    let accuracy = |clf: &FeatureConvexClassifier| {
        ds.inputs.iter().zip(&ds.labels).filter(|(x, c)| clf.predict(x).unwrap() == **c).count() as f64 / ds.len() as f64
    };
    let concat = fit(FeatureMap::concat_from_data(&ds.inputs, 1).unwrap());
    let ident = fit(FeatureMap::identity(2));
    let inner = ds.inputs_of(Class::Sensitive);
    let min_radius = inner
        .iter()
        .map(|x| concat.certify(x, &[Norm::L2]).unwrap().radius(Norm::L2).unwrap())
        .fold(f64::INFINITY, f64::min);
    let (acc_concat, acc_ident) = (accuracy(&concat), accuracy(&ident));
    // no convex class-2 region can hold the outer ring without the inner disk
    let outer = points_from_tensors(&ds.inputs_of(Class::Other).into_iter().cloned().collect::<Vec<_>>());
    let inner_pts = points_from_tensors(&inner.into_iter().cloned().collect::<Vec<_>>());
    let separable = is_convexly_separable(&inner_pts, &outer, 1e-6).unwrap().separable;
    outcome(
        acc_concat == 1.0 && min_radius > 0.0 && acc_ident < 1.0,
        format!(
            "concat train acc {acc_concat}, min inner l2 radius {min_radius:.4}; identity train acc {acc_ident} \
             (inner separable from hull of outer: {separable}); {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn balancing(m: &Mnist) -> Outcome {
    let logits = test_logits(&m.clf, &m.test);
    let (a1, a2) = rates_at(&logits, &m.test.labels, m.tau_test).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for k in 0..100 {
        let n = rng.random_range(2..=1000);
        let coarse = k % 2 == 0;
        let mut logits: Vec<f32> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(-20i32..20) as f32 * 0.25
                } else {
                    rng.random_range(-5.0f32..5.0)
                }
            })
            .collect();
        let mut labels: Vec<Class> = (0..n).map(|_| if rng.random() { Class::Sensitive } else { Class::Other }).collect();
        labels[0] = Class::Sensitive;
        labels[1] = Class::Other;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        logits = idx.iter().map(|&i| logits[i]).collect();
        labels = idx.iter().map(|&i| labels[i]).collect();
        if balance_threshold(&logits, &labels).unwrap() != balance_oracle(&logits, &labels) {
            mismatches += 1;
        }
    }
    outcome(
        (a1 - a2).abs() <= 0.02 && mismatches == 0,
        format!("test tau {:.5}: alpha1 {a1:.4}, alpha2 {a2:.4}; oracle mismatches {mismatches}/100", m.tau_test),
    )
}

fn quality(m: &Mnist) -> Outcome {
    let clf = m.clf.with_tau(m.tau_test);
    let logits = test_logits(&clf, &m.test);
    let (a1, a2) = rates_at(&logits, &m.test.labels, clf.tau()).unwrap();
    let balanced = 0.5 * (a1 + a2);
    let mut radii = sensitive_radii(&clf, &m.test, Norm::L1).unwrap();
    radii.sort_by(f64::total_cmp);
    let median = radii[radii.len() / 2];
    let dir = out_dir();
    for p in Norm::ALL {
        let rs = sensitive_radii(&clf, &m.test, p).unwrap();
        let max = rs.iter().copied().filter(|r| r.is_finite()).fold(0.0, f64::max);
        let curve = certified_accuracy_curve(&clf, &m.test, p, &radius_grid(max, 101)).unwrap();
        let file = std::fs::File::create(dir.join(format!("curve_{}.csv", p.label()))).unwrap();
        write_curve_csv(file, &curve).unwrap();
    }
    outcome(
        balanced >= MIN_BALANCED_ACCURACY && median >= MIN_MEDIAN_L1_RADIUS,
        format!(
            "balanced accuracy {balanced:.4} (bar {MIN_BALANCED_ACCURACY}), median l1 radius {median:.3} (bar {MIN_MEDIAN_L1_RADIUS}); curves in {}",
            dir.display()
        ),
    )
}

fn throughput(m: &Mnist) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let inputs: Vec<&Tensor> = m.test.inputs.iter().cycle().take(1000).collect();
    let elapsed = pool.install(|| {
        let t = Instant::now();
        for x in &inputs {
            std::hint::black_box(m.clf.certify(x, &Norm::ALL).unwrap());
        }
        t.elapsed()
    });
    let per = elapsed.as_secs_f64() / inputs.len() as f64;
    outcome(per <= 5e-3, format!("{:.3} ms per input (all three norms), 1000 inputs, 1 thread", per * 1e3))
}

fn scale_invariance(m: &Mnist) -> Outcome {
    let clf = m.clf.with_tau(m.tau_test);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs: Vec<Tensor> = (0..100)
        .map(|_| {
            let base = &m.test.inputs[rng.random_range(0..m.test.len())];
            Tensor::vector(base.data().iter().map(|&v| (v + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0)).collect()).unwrap()
        })
        .collect();
    let reference: Vec<_> = inputs.iter().map(|x| clf.certify(x, &Norm::ALL).unwrap()).collect();
    let positive = reference.iter().filter(|c| c.per_norm[0].radius > 0.0).count();
    let mut worst = 0.0f64;
    for c in [0.1f32, 1.0, 10.0, 100.0] {
        let (phi, mut g, tau) = clf.clone().into_parts();
        g.scale_output(c);
        let scaled = FeatureConvexClassifier::new(phi, g, tau * c).unwrap();
        for (x, want) in inputs.iter().zip(&reference) {
            let got = scaled.certify(x, &Norm::ALL).unwrap();
            for (a, b) in want.per_norm.iter().zip(&got.per_norm) {
                let rel = if a.radius == b.radius { 0.0 } else { (a.radius - b.radius).abs() / a.radius.abs() };
                worst = worst.max(rel);
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!("100 inputs ({positive} with positive radius), c in {{0.1,1,10,100}}, max rel change {worst:.2e}"),
    )
}

fn serialization(m: &Mnist) -> Outcome {
    let dir = out_dir();
    let (a, b) = (dir.join("model.ccm"), dir.join("model_resaved.ccm"));
    save_classifier(&m.clf, &a).unwrap();
    let back = load_classifier(&a).unwrap();
    save_classifier(&back, &b).unwrap();
    let same_file = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let same_params = m.clf.icnn().tensors().iter().zip(back.icnn().tensors()).all(|(x, y)| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    }) && m.clf.tau().to_bits() == back.tau().to_bits()
        && m.clf.feature_map() == back.feature_map();
    let mut differing = 0;
    for x in &m.test.inputs {
        let (c1, c2) = (m.clf.certify(x, &Norm::ALL).unwrap(), back.certify(x, &Norm::ALL).unwrap());
        let same = c1.shifted_logit.to_bits() == c2.shifted_logit.to_bits()
            && c1.per_norm.iter().zip(&c2.per_norm).all(|(a, b)| a.radius.to_bits() == b.radius.to_bits());
        differing += usize::from(!same);
    }
    outcome(
        same_file && same_params && differing == 0,
        format!(
            "file bytes identical: {same_file}, parameters bit-identical: {same_params}, {differing}/{} certificates differ",
            m.test.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mnist = train_mnist();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fresh: Vec<IcnnParams> = [vec![32], vec![32, 16], vec![64, 32, 16]]
        .iter()
        .map(|h| random_icnn(&mut rng, 16, h, true))
        .collect();
    let ring_ds = make_ring(&RingSpec::default()).unwrap();
    let ring_phi = FeatureMap::concat_from_data(&ring_ds.inputs, 1).unwrap();
    let ring_spec = IcnnSpec::new(ring_phi.output_dim(), vec![200, 50], true, 0).unwrap();
    let ring_cfg = TrainConfig { epochs: 50, learning_rate: 0.01, batch_size: 16, val_fraction: 0.0, ..TrainConfig::default() };
    let ring_model = train(&ring_spec, ring_phi.clone(), &ring_ds, &ring_cfg).unwrap().0;

    let features = |phi: &FeatureMap, xs: &[Tensor]| -> Vec<Tensor> { xs.iter().map(|x| phi.apply(x).unwrap()).collect() };
    let fresh_pool: Vec<Tensor> = (0..200).map(|_| random_vector(&mut rng, 16, -2.0, 2.0)).collect();
    let mut convex_models: Vec<(&str, &IcnnParams, Vec<Tensor>)> = vec![
        ("MNIST 3-8", mnist.clf.icnn(), features(mnist.clf.feature_map(), &mnist.test.inputs)),
        ("ring", ring_model.icnn(), features(&ring_phi, &ring_ds.inputs)),
    ];
    for g in &fresh {
        convex_models.push(("fresh", g, fresh_pool.clone()));
    }

    let criteria: Vec<Criterion> = vec![
        ("certificate soundness", Box::new(|| soundness(&mnist))),
        ("gradient correctness", Box::new(gradients)),
        ("convexity invariants", Box::new(|| convexity(&convex_models))),
        ("separability bound", Box::new(bound_vs_monte_carlo)),
        ("ring reproduction", Box::new(ring)),
        ("threshold balancing", Box::new(|| balancing(&mnist))),
        ("MNIST 3-8 quality", Box::new(|| quality(&mnist))),
        ("certification throughput", Box::new(|| throughput(&mnist))),
        ("radius scale invariance", Box::new(|| scale_invariance(&mnist))),
        ("serialization", Box::new(|| serialization(&mnist))),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let o = run();
        failures += usize::from(!o.pass);
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/10 passed in {:.1}s", 10 - failures, started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
