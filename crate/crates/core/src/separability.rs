//! Convex separability of finite point sets: projection onto a convex hull
//! by pairwise Frank-Wolfe, the slab shortcut, the random-point
//! probability bound and its Monte-Carlo check.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FW_TOL: f64 = 1e-9;
/// Reconstruction errors at or below this count as hull membership.
pub const DEFAULT_VERDICT_TOL: f64 = 1e-6;
/// Gram-based running values are refreshed this often to bound drift.
const REFRESH_EVERY: usize = 64;

pub type Point = Vec<f64>;

pub fn points_from_tensors(xs: &[Tensor]) -> Vec<Point> {
    xs.iter().map(|x| x.data().iter().map(|&v| v as f64).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Convex weights over the hull vertices.
    pub alpha: Vec<f64>,
    /// `‖x − Σ α_j y_j‖₂`.
    pub error: f64,
    /// Frank-Wolfe duality gap of the squared error; `error² − gap` lower
    /// bounds the optimal squared error.
    pub gap: f64,
    pub iterations: usize,
}

/// Convex hull of a fixed vertex set with its Gram matrix cached, so each
/// Frank-Wolfe iteration costs O(N) after an O(N·d) setup per query.
pub struct ConvexHull<'a> {
    vertices: &'a [Point],
    gram: Vec<f64>,
}

/// Early exit used by the separability verdict: stop as soon as the
/// reconstruction error is provably above or below `threshold`.
#[derive(Clone, Copy, Debug)]
struct Decide {
    threshold: f64,
}

impl<'a> ConvexHull<'a> {
    pub fn new(vertices: &'a [Point]) -> Result<Self> {
        let first = vertices
            .first()
            .ok_or_else(|| Error::Config("convex hull needs at least one point".into()))?;
        let d = first.len();
        if let Some(bad) = vertices.iter().find(|v| v.len() != d) {
            return Err(Error::Shape {
                context: "hull vertex",
                expected: vec![d],
                actual: vec![bad.len()],
            });
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("hull vertex is not finite".into()));
        }
        let n = vertices.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| dot(&vertices[i], &vertices[j])).collect())
            .collect();
        Ok(ConvexHull {
            vertices,
            gram: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    fn g(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.len() + j]
    }

    /// Projection of `x` onto the hull, minimising the squared error over
    /// the simplex until `gap ≤ tol·(1 + error²)` or `max_iters`.
    pub fn reconstruct(&self, x: &[f64], tol: f64, max_iters: usize) -> Result<Reconstruction> {
        self.solve(x, tol, max_iters, None)
    }

    fn solve(&self, x: &[f64], tol: f64, max_iters: usize, decide: Option<Decide>) -> Result<Reconstruction> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                context: "reconstruction target",
                expected: vec![self.dim()],
                actual: vec![x.len()],
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("reconstruction target is not finite".into()));
        }
        let n = self.len();
        let b: Vec<f64> = self.vertices.iter().map(|y| dot(y, x)).collect();
        let xx = dot(x, x);

        let start = (0..n)
            .min_by(|&i, &j| (self.g(i, i) - 2.0 * b[i]).total_cmp(&(self.g(j, j) - 2.0 * b[j])))
            .expect("nonempty hull");
        let mut alpha = vec![0.0; n];
        alpha[start] = 1.0;
        // ga = G·α
        let mut ga: Vec<f64> = (0..n).map(|j| self.g(j, start)).collect();
        let mut grad = vec![0.0; n];
        let mut gap: f64;
        let mut iterations = 0;

        loop {
            if iterations % REFRESH_EVERY == 0 && iterations > 0 {
                for (j, gj) in ga.iter_mut().enumerate() {
                    *gj = alpha
                        .iter()
                        .enumerate()
                        .filter(|(_, &a)| a > 0.0)
                        .map(|(k, &a)| a * self.g(j, k))
                        .sum();
                }
            }
            let aga = dot(&alpha, &ga);
            let err2 = (aga - 2.0 * dot(&alpha, &b) + xx).max(0.0);
            for j in 0..n {
                grad[j] = 2.0 * (ga[j] - b[j]);
            }
            let g_alpha = dot(&alpha, &grad);
            let s = (0..n).min_by(|&i, &j| grad[i].total_cmp(&grad[j])).expect("nonempty hull");
            let gap_fw = (g_alpha - grad[s]).max(0.0);
            gap = gap_fw;

            let converged = gap_fw <= tol * (1.0 + err2);
            let decided = decide.is_some_and(|d| {
                let t2 = d.threshold * d.threshold;
                err2 <= t2 || err2 - gap_fw > t2
            });
            let stop = if decide.is_some() { decided } else { converged };
            if stop || gap_fw == 0.0 || iterations >= max_iters {
                break;
            }

            let away = (0..n)
                .filter(|&j| alpha[j] > 0.0)
                .max_by(|&i, &j| grad[i].total_cmp(&grad[j]))
                .expect("support is nonempty");
            // pairwise step: move weight from `away` to `s`, d = e_s − e_a
            let slope = grad[away] - grad[s];
            if !(slope > 0.0) {
                break;
            }
            let gamma_max = alpha[away];
            let curv = self.g(s, s) - 2.0 * self.g(s, away) + self.g(away, away);
            let gamma = if curv > 0.0 { (slope / (2.0 * curv)).min(gamma_max) } else { gamma_max };
            for (j, gj) in ga.iter_mut().enumerate() {
                *gj += gamma * (self.g(j, s) - self.g(j, away));
            }
            alpha[s] += gamma;
            alpha[away] -= gamma;
            if gamma == gamma_max || alpha[away] < 0.0 {
                alpha[away] = 0.0;
            }
            iterations += 1;
        }

        let mut r: Vec<f64> = x.iter().map(|v| -v).collect();
        for (j, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                for (ri, yi) in r.iter_mut().zip(&self.vertices[j]) {
                    *ri += a * yi;
                }
            }
        }
        Ok(Reconstruction {
            alpha,
            error: dot(&r, &r).sqrt(),
            gap,
            iterations,
        })
    }
}

/// Default iteration cap: 50 per hull vertex.
pub fn default_max_iters(n: usize) -> usize {
    50 * n.max(1)
}

/// Closest point of `conv(y)` to `x`.
pub fn convex_reconstruction(x: &[f64], y: &[Point], tol: f64, max_iters: usize) -> Result<Reconstruction> {
    ConvexHull::new(y)?.reconstruct(x, tol, max_iters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub reconstructions: Vec<Reconstruction>,
    pub min_error: f64,
    pub separable: bool,
    /// First class-1 point found inside the hull (error ≤ tolerance).
    pub witness: Option<usize>,
    pub tol: f64,
}

impl SeparabilityReport {
    pub fn errors(&self) -> Vec<f64> {
        self.reconstructions.iter().map(|r| r.error).collect()
    }

    /// CSV: point_index, error_l2, gap, separable_flag.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["point_index", "error_l2", "gap", "separable_flag"])?;
        for (i, r) in self.reconstructions.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.error.to_string(),
                r.gap.to_string(),
                u8::from(r.error > self.tol).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<separability csv>", e))?;
        Ok(())
    }
}

/// Whether no point of `x1` lies in `conv(x2)`, judged per point by
/// reconstruction error against `tol`.
pub fn is_convexly_separable(x1: &[Point], x2: &[Point], tol: f64) -> Result<SeparabilityReport> {
    is_convexly_separable_with(x1, x2, tol, DEFAULT_FW_TOL, default_max_iters(x2.len()))
}

pub fn is_convexly_separable_with(
    x1: &[Point],
    x2: &[Point],
    tol: f64,
    fw_tol: f64,
    max_iters: usize,
) -> Result<SeparabilityReport> {
    if x1.is_empty() {
        return Err(Error::Config("class-1 point set is empty".into()));
    }
    let hull = ConvexHull::new(x2)?;
    let decide = Some(Decide { threshold: tol });
    let reconstructions = x1
        .par_iter()
        .map(|x| hull.solve(x, fw_tol, max_iters, decide))
        .collect::<Result<Vec<_>>>()?;
    let min_error = reconstructions.iter().map(|r| r.error).fold(f64::INFINITY, f64::min);
    let witness = reconstructions.iter().position(|r| r.error <= tol);
    Ok(SeparabilityReport {
        reconstructions,
        min_error,
        separable: witness.is_none(),
        witness,
        tol,
    })
}

/// Smallest coordinate `k` with `max_{x∈X1} x_k < min_{y∈X2} y_k`, a
/// sufficient witness of separability.
pub fn slab_check(x1: &[Point], x2: &[Point]) -> Option<usize> {
    let d = x1.first()?.len();
    x2.first()?;
    (0..d).find(|&k| {
        let hi = x1.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
        let lo = x2.iter().map(|y| y[k]).fold(f64::INFINITY, f64::min);
        hi < lo
    })
}

/// Lower bound on the probability that `m` and `n` i.i.d. points in `d`
/// dimensions are convexly separable: `1 − (1 − m!n!/(m+n)!)^d`, and 1 when
/// `d ≥ m + n`.
pub fn separability_bound(m: usize, n: usize, d: usize) -> Result<f64> {
    if m == 0 || n == 0 || d == 0 {
        return Err(Error::Config("bound needs M, N, d ≥ 1".into()));
    }
    if d >= m + n {
        return Ok(1.0);
    }
    // m!n!/(m+n)! = Π_{i=1..m} i/(n+i)
    let ratio: f64 = (1..=m).map(|i| i as f64 / (n + i) as f64).product();
    Ok(-(d as f64 * (-ratio).ln_1p()).exp_m1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    pub frequency: f64,
    pub bound: f64,
}

impl MonteCarloSummary {
    /// Binomial standard error at the bound.
    pub fn standard_error(&self) -> f64 {
        (self.bound * (1.0 - self.bound) / self.trials as f64).sqrt()
    }
}

fn uniform_points<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Vec<Point> {
    (0..count)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// Fraction of trials in which `m` class-1 and `n` class-2 points drawn
/// uniformly from `[−1, 1]^d` are convexly separable. Trial `t` uses stream
/// `t` of the seeded generator, so results do not depend on scheduling.
pub fn mc_separability(m: usize, n: usize, d: usize, trials: usize, seed: u64) -> Result<MonteCarloSummary> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let bound = separability_bound(m, n, d)?;
    let hits = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let x1 = uniform_points(m, d, &mut rng);
            let x2 = uniform_points(n, d, &mut rng);
            Ok(is_convexly_separable(&x1, &x2, DEFAULT_VERDICT_TOL)?.separable as usize)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(MonteCarloSummary {
        m,
        n,
        d,
        trials,
        frequency: hits as f64 / trials as f64,
        bound,
    })
}
