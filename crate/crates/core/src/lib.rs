//! Self-balanced domain generalization.
//!
//! A task classifier is trained on imbalanced multi-domain data while an
//! auxiliary reweighting network, conditioned on each sample's loss and a
//! one-hot domain vector, learns per-sample loss weights from a small
//! balanced meta-set through a one-step look-ahead update.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the experiment
//! harness and the gradient checks use.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod models;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;
pub type Tape = autodiff::Tape<f64>;
