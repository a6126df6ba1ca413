//! Bayesian hypernetwork meta-learning for few-shot classification.
//!
//! A hypernetwork reads an encoded, label-enhanced support set and emits a
//! per-task posterior over updates to the classifier head: either a
//! diagonal Gaussian or a conditional continuous normalizing flow. MAML and
//! point-wise hypernetwork baselines share the same engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the 64-bit precision used by training,
//! checkpoints and the command-line tool.

pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod hypernet;
pub mod meta;
pub mod nn;
pub mod parallel;
pub mod posteriors;
pub mod scalar;
pub mod target;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Var<'t> = autodiff::Var<'t, f64>;
pub type Dataset = episodes::Dataset<f64>;
pub type TaskEpisode = episodes::TaskEpisode<f64>;
pub type ParamSet = nn::ParamSet<f64>;
