//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the recorded
//! nodes in reverse and yields [`Gradients`] for every leaf that asked for
//! one. The tape is rebuilt for every training step.
//!
//! Values are `f32`; reductions and convolution inner loops accumulate in
//! `f64`. There is no implicit broadcasting: the only mixed-shape arithmetic
//! is multiplication or shifting by a scalar constant. Layout changes go
//! through explicit [`Tape::reshape`], [`Tape::gather`] and [`Tape::concat`].

mod conv;
mod ops;
mod tape;
mod tensor;

pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input outside the operation's domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("tensor has no elements")]
    EmptyTensor,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

impl AutodiffError {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
