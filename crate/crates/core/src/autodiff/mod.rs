//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records each operation as it runs. [`Tape::backward`] walks the
//! record in reverse and returns a [`Gradients`] table. The engine is generic
//! over [`Scalar`] so the same graph can be checked in `f64` and trained in
//! `f32`.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::ConvGeom;
pub use tape::{Gradients, ResampleTaps, Tape, Var, PROB_EPS};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
