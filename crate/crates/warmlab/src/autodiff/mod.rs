//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! The surface is deliberately small: the handful of ops the residual stack
//! needs, recorded on an eager [`Tape`] and differentiated by one reverse
//! sweep. Everything is plain `f64` loops — at desk scale, clarity beats
//! cleverness, and determinism falls out for free.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward needs a scalar root, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("node index {index} is not on this tape")]
    UnknownNode { index: usize },

    #[error("{rows} logit rows but {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("label smoothing must be in [0, 1), got {value}")]
    InvalidSmoothing { value: f64 },

    #[error("finite-difference step must be positive and finite, got {value}")]
    InvalidStepSize { value: f64 },

    #[error("loss is non-finite ({value}) at the unperturbed point")]
    NonFiniteCenter { value: f64 },

    #[error("loss became non-finite while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
}
