//! certitext-core: train small text classifiers and certify their
//! robustness to bounded symbol substitutions.
//!
//! The pipeline: a `Network` (embedding + conv/relu/avgpool/linear stack)
//! classifies token sequences; a `SubstitutionTable` defines which tokens
//! may be swapped; `bounds` propagates intervals that cover every sequence
//! within a substitution budget; `verify` compares that certificate against
//! exhaustive enumeration and a first-order attack; `train` fits models
//! under four regimes, including one that optimizes the certified bound.

pub mod adam;
pub mod attack;
pub mod backprop;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod perturb;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
