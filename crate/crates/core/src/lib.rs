//! Classification under conditional probability shift.
//!
//! Source data carries labels `y` together with a conditioning block `z` and
//! the remaining features `x`; target data carries only `(x, z)`. When the
//! class-conditional law of `x` given `(y, z)` is shared between domains, the
//! target posterior follows from the source posterior by reweighting with
//! `q(y|z) / p(y|z)` ([`adjust`]). The target conditional `q(y|z)` is a
//! softmax model estimated by EM on the unlabeled target rows ([`em`]).
//!
//! [`synth`] generates benchmark data and [`eval`] scores the methods.

pub mod adjust;
pub mod data;
pub mod em;
mod error;
pub mod eval;
pub mod softmax;
pub mod synth;

pub use data::{FeatureBlock, LabeledDataset, PosteriorMatrix, SoftTargets, UnlabeledDataset};
pub use error::{Error, ErrorKind, Result};
pub use softmax::{FitConfig, SoftmaxParams};
