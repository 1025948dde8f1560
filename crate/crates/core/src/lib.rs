//! Feature-convex binary classifiers with closed-form robustness
//! certificates for ℓ1, ℓ2 and ℓ∞ perturbations of the sensitive class.

// `!(a > b)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod class;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod featuremap;
pub mod gradcheck;
pub mod icnn;
pub mod model_io;
pub mod norm;
pub mod separability;
pub mod train;
pub mod tape;
pub mod tensor;

pub use certify::{Certificate, FeatureConvexClassifier};
pub use class::Class;
pub use error::{Error, Result};
pub use featuremap::{FeatureKind, FeatureMap};
pub use icnn::{IcnnParams, IcnnSpec};
pub use norm::Norm;
pub use tensor::{Scalar, Tensor};
