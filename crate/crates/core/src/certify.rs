//! Thresholded feature-convex classifier and its closed-form certificate.
//!
//! For a class-1 input the tangent plane of the convex logit at `φ(x)`
//! underestimates the logit everywhere, so no perturbation with
//! `‖δ‖_p < (g(φ(x)) + τ) / (Lip_p(φ) · ‖∇g(φ(x))‖_{p,*})` can push the
//! shifted logit to zero.

use std::io::Write;

use rayon::prelude::*;

use crate::class::Class;
use crate::error::{Error, Result};
use crate::featuremap::FeatureMap;
use crate::icnn::{record, IcnnParams};
use crate::norm::Norm;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Dual norms at or below this are treated as a zero subgradient.
pub const TOL_GRAD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConvexClassifier {
    feature_map: FeatureMap,
    icnn: IcnnParams,
    tau: f32,
}

impl FeatureConvexClassifier {
    pub fn new(feature_map: FeatureMap, icnn: IcnnParams, tau: f32) -> Result<Self> {
        if feature_map.output_dim() != icnn.input_dim() {
            return Err(Error::Shape {
                context: "feature map output vs ICNN input",
                expected: vec![icnn.input_dim()],
                actual: vec![feature_map.output_dim()],
            });
        }
        if !icnn.is_projected() {
            return Err(Error::Contract(
                "ICNN parameters must be projected (constrained weights ≥ 0)".into(),
            ));
        }
        if !tau.is_finite() {
            return Err(Error::Numeric(format!("threshold shift {tau} is not finite")));
        }
        Ok(FeatureConvexClassifier {
            feature_map,
            icnn,
            tau,
        })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn icnn(&self) -> &IcnnParams {
        &self.icnn
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn input_dim(&self) -> usize {
        self.feature_map.input_dim()
    }

    pub fn set_tau(&mut self, tau: f32) {
        self.tau = tau;
    }

    pub fn with_tau(&self, tau: f32) -> Self {
        FeatureConvexClassifier {
            tau,
            ..self.clone()
        }
    }

    /// Same feature map and threshold with new network weights.
    pub fn with_icnn(self, icnn: IcnnParams) -> Result<Self> {
        FeatureConvexClassifier::new(self.feature_map, icnn, self.tau)
    }

    pub fn into_parts(self) -> (FeatureMap, IcnnParams, f32) {
        (self.feature_map, self.icnn, self.tau)
    }

    /// Unshifted logit `g(φ(x))`.
    pub fn logit(&self, x: &Tensor) -> Result<f32> {
        let z = self.feature_map.apply(x)?;
        self.icnn.forward(&z)
    }

    /// `g(φ(x)) + τ`.
    pub fn shifted_logit(&self, x: &Tensor) -> Result<f32> {
        Ok(self.logit(x)? + self.tau)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Class> {
        Ok(Class::from_shifted_logit(self.shifted_logit(x)?))
    }

    /// Shifted logit and its gradient with respect to the raw input `x`
    /// (through the feature map).
    pub fn shifted_logit_and_input_grad(&self, x: &Tensor) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let ids = self.icnn.add_to_tape(&mut tape, false);
        let xid = tape.leaf_ref(x);
        let z = self.feature_map.record(&mut tape, xid)?;
        let out = record(&mut tape, z, &ids)?;
        let logit = tape.value(out).item()?;
        let grads = tape.gradient(out, 1.0)?;
        Ok((logit + self.tau, grads.wrt_or_zeros(xid, x.shape())))
    }

    /// Certificate for `x` under each norm in `norms`.
    pub fn certify(&self, x: &Tensor, norms: &[Norm]) -> Result<Certificate> {
        let z = self.feature_map.apply(x)?;
        let (logit, grad) = self.icnn.input_gradient(&z)?;
        if !logit.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric("non-finite logit or gradient".into()));
        }
        let shifted_logit = logit + self.tau;
        let predicted = Class::from_shifted_logit(shifted_logit);
        let per_norm = norms
            .iter()
            .map(|&norm| {
                let lipschitz = self.feature_map.lipschitz(norm);
                let dual_norm = norm.dual_norm(grad.data());
                NormCertificate {
                    norm,
                    lipschitz,
                    dual_norm,
                    radius: radius_from_parts(shifted_logit, lipschitz, dual_norm),
                }
            })
            .collect();
        Ok(Certificate {
            predicted,
            shifted_logit,
            grad,
            per_norm,
        })
    }

    /// Certificate for a single norm.
    pub fn certified_radius(&self, x: &Tensor, p: Norm) -> Result<Certificate> {
        self.certify(x, &[p])
    }

    /// Certifies every input; parallel over inputs on the current rayon pool.
    pub fn certify_batch(&self, inputs: &[Tensor], norms: &[Norm]) -> Result<Vec<Certificate>> {
        inputs.par_iter().map(|x| self.certify(x, norms)).collect()
    }
}

/// Radius from the certificate ingredients.
///
/// Zero for class-2 predictions, `+∞` when the subgradient vanishes.
pub fn radius_from_parts(shifted_logit: f32, lipschitz: f64, dual_norm: f64) -> f64 {
    if shifted_logit <= 0.0 {
        0.0
    } else if dual_norm <= TOL_GRAD {
        f64::INFINITY
    } else {
        shifted_logit as f64 / (lipschitz * dual_norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormCertificate {
    pub norm: Norm,
    pub lipschitz: f64,
    pub dual_norm: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub predicted: Class,
    /// `g(φ(x)) + τ`.
    pub shifted_logit: f32,
    /// `∇g(φ(x))`, in feature space.
    pub grad: Tensor,
    pub per_norm: Vec<NormCertificate>,
}

impl Certificate {
    pub fn get(&self, norm: Norm) -> Option<&NormCertificate> {
        self.per_norm.iter().find(|c| c.norm == norm)
    }

    pub fn radius(&self, norm: Norm) -> Option<f64> {
        self.get(norm).map(|c| c.radius)
    }
}

/// Formats a radius for CSV output; `+∞` becomes `inf`.
pub fn format_radius(r: f64) -> String {
    if r.is_infinite() {
        "inf".to_string()
    } else {
        format!("{r}")
    }
}

/// One row of the certificate CSV.
pub struct CertificateRow<'a> {
    pub index: usize,
    pub true_class: Class,
    pub certificate: &'a Certificate,
}

pub const CERTIFICATE_CSV_HEADER: [&str; 7] = [
    "index",
    "true_class",
    "predicted_class",
    "logit",
    "radius_l1",
    "radius_l2",
    "radius_linf",
];

/// Writes the certificate CSV. Norms missing from a certificate are left blank.
pub fn write_certificate_csv<W: Write>(out: W, rows: &[CertificateRow<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CERTIFICATE_CSV_HEADER)?;
    for row in rows {
        let c = row.certificate;
        let radius = |n| c.radius(n).map(format_radius).unwrap_or_default();
        w.write_record([
            row.index.to_string(),
            row.true_class.to_string(),
            c.predicted.to_string(),
            format!("{}", c.shifted_logit),
            radius(Norm::L1),
            radius(Norm::L2),
            radius(Norm::Linf),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<certificate csv>", e))?;
    Ok(())
}
