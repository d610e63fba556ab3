//! Dense tensors with a first-order reverse-mode tape.
//!
//! Enough machinery for MLP forward passes, per-sample cross-entropy losses,
//! and the per-sample gradient matrices the meta-reweighting update needs.

mod fd;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use fd::{finite_diff_grad, max_relative_error, relative_error};
pub use params::{Checkpoint, CheckpointEntry, ParamLayout, ParamSet};
pub use tape::{
    softmax_xent_forward, BoundParams, Fault, Gradients, PerSampleGrads, Tape, Var,
};
pub use tensor::{stable_sigmoid, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("per-sample gradients unavailable: {0}")]
    NotBatchSeparable(String),
    #[error("checkpoint i/o: {0}")]
    Checkpoint(String),
}
