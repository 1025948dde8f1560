#![allow(dead_code)]

use convexcert::{Class, FeatureConvexClassifier, FeatureMap, IcnnParams, IcnnSpec, Tensor};
use rand::Rng;

/// ICNN with every parameter drawn at random, then projected.
pub fn random_icnn<R: Rng>(rng: &mut R, input_dim: usize, hidden: &[usize], passthrough: bool) -> IcnnParams {
    let spec = IcnnSpec::new(input_dim, hidden.to_vec(), passthrough, 0).unwrap();
    let tensors = spec
        .param_shapes()
        .into_iter()
        .zip(spec.constraint_mask())
        .map(|(shape, nonneg)| {
            let n: usize = shape.iter().product();
            let fan_in = if shape.len() == 2 { shape[1] } else { 1 } as f32;
            let scale = 1.0 / fan_in.sqrt();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let v = rng.random_range(-scale..scale);
                    if nonneg { v.abs() } else { v }
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        })
        .collect();
    IcnnParams::from_tensors(spec, tensors).unwrap()
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `g(x) = w·x + b` on the region `w·x > -10`, as a one-unit ICNN over the
/// identity feature map.
pub fn affine_classifier(w: &[f32], b: f32, tau: f32) -> FeatureConvexClassifier {
    let spec = IcnnSpec::new(w.len(), vec![1], false, 0).unwrap();
    let tensors = vec![
        Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(),
        Tensor::vector(vec![10.0]).unwrap(),
        Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        Tensor::vector(vec![b - 10.0]).unwrap(),
    ];
    let icnn = IcnnParams::from_tensors(spec, tensors).unwrap();
    FeatureConvexClassifier::new(FeatureMap::identity(w.len()), icnn, tau).unwrap()
}

/// Balancing by brute force: every candidate cut is scored by a direct
/// count, smallest `|α₁ − α₂|` wins, ties to the larger shift.
pub fn balance_oracle(logits: &[f32], labels: &[Class]) -> f32 {
    let mut v: Vec<f32> = logits.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    let lo = v[0] as f64;
    let hi = v[v.len() - 1] as f64;
    let mut cuts = vec![lo - lo.abs().max(1.0), hi + hi.abs().max(1.0)];
    for i in 1..v.len() {
        cuts.push((v[i - 1] as f64 + v[i] as f64) / 2.0);
    }
    let n1 = labels.iter().filter(|&&c| c == Class::Sensitive).count() as f64;
    let n2 = labels.len() as f64 - n1;
    let mut best: Option<(f64, f32)> = None;
    for c in cuts {
        let tau = -(c as f32);
        let mut a1 = 0.0;
        let mut a2 = 0.0;
        for (&s, &l) in logits.iter().zip(labels) {
            let one = s + tau > 0.0;
            match l {
                Class::Sensitive if one => a1 += 1.0,
                Class::Other if !one => a2 += 1.0,
                _ => {}
            }
        }
        // |α₁ − α₂|·n1·n2, exact in integers
        let key = (a1 * n2 - a2 * n1).abs();
        best = match best {
            None => Some((key, tau)),
            Some((k, t)) if key < k || (key == k && tau > t) => Some((key, tau)),
            keep => keep,
        };
    }
    best.unwrap().1
}
