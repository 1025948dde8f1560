//! Lipschitz feature maps applied before the convex network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::Norm;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Identity,
    /// `φ(x) = (x − µ, |x − µ|)`.
    #[serde(alias = "concat")]
    MeanOffsetAbsConcat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    input_dim: usize,
    mu: Option<Tensor>,
}

impl FeatureMap {
    pub fn identity(input_dim: usize) -> Self {
        FeatureMap {
            kind: FeatureKind::Identity,
            input_dim,
            mu: None,
        }
    }

    /// Concatenation map with offset `mu` (one entry per input coordinate).
    pub fn concat(mu: Tensor) -> Result<Self> {
        if mu.rank() != 1 {
            return Err(Error::Shape {
                context: "feature map mean",
                expected: vec![mu.len()],
                actual: mu.shape().to_vec(),
            });
        }
        if !mu.is_finite() {
            return Err(Error::Numeric("feature map mean is not finite".into()));
        }
        Ok(FeatureMap {
            kind: FeatureKind::MeanOffsetAbsConcat,
            input_dim: mu.len(),
            mu: Some(mu),
        })
    }

    /// Concatenation map whose offset is the per-channel mean of `inputs`
    /// (channel-major layout), broadcast back to every pixel.
    pub fn concat_from_data(inputs: &[Tensor], channels: usize) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("cannot compute a mean of zero samples".into()))?;
        let d = first.len();
        if channels == 0 || d % channels != 0 {
            return Err(Error::Config(format!(
                "input dimension {d} is not divisible into {channels} channels"
            )));
        }
        let per_channel = d / channels;
        let mut sums = vec![0.0f64; channels];
        for x in inputs {
            x.expect_vector(d, "feature map mean")?;
            for (c, chunk) in x.data().chunks_exact(per_channel).enumerate() {
                sums[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (inputs.len() * per_channel) as f64;
        let mu: Vec<f32> = sums
            .iter()
            .flat_map(|s| std::iter::repeat_n((s / count) as f32, per_channel))
            .collect();
        FeatureMap::concat(Tensor::vector(mu)?)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn mu(&self) -> Option<&Tensor> {
        self.mu.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Identity => self.input_dim,
            FeatureKind::MeanOffsetAbsConcat => 2 * self.input_dim,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_vector(self.input_dim, "feature map input")?;
        Ok(match (&self.kind, &self.mu) {
            (FeatureKind::MeanOffsetAbsConcat, Some(mu)) => {
                let d = self.input_dim;
                let mut out = Vec::with_capacity(2 * d);
                out.extend(x.data().iter().zip(mu.data()).map(|(&a, &m)| a - m));
                out.extend_from_within(..d);
                for v in &mut out[d..] {
                    *v = v.abs();
                }
                Tensor::from_parts(vec![2 * d], out)
            }
            _ => x.clone(),
        })
    }

    /// Records `φ(x)` on a tape so gradients can flow back to `x`.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a, f32>, x: NodeId) -> Result<NodeId> {
        tape.value(x).expect_vector(self.input_dim, "feature map input")?;
        match (&self.kind, &self.mu) {
            (FeatureKind::MeanOffsetAbsConcat, Some(mu)) => {
                let m = tape.constant_ref(mu);
                let centered = tape.sub(x, m)?;
                let magnitude = tape.abs(centered);
                tape.concat(centered, magnitude)
            }
            _ => Ok(x),
        }
    }

    /// Lipschitz constant of φ with respect to `p` (same norm on both sides).
    pub fn lipschitz(&self, p: Norm) -> f64 {
        match self.kind {
            FeatureKind::Identity => 1.0,
            FeatureKind::MeanOffsetAbsConcat => match p {
                Norm::L1 => 2.0,
                Norm::L2 => std::f64::consts::SQRT_2,
                Norm::Linf => 1.0,
            },
        }
    }

    /// [`lipschitz`](Self::lipschitz) for a norm given by name.
    pub fn lipschitz_for(&self, p: &str) -> Result<f64> {
        Ok(self.lipschitz(p.parse()?))
    }
}
