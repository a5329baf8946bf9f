//! Arrays, reverse-mode differentiation and special functions.

mod array;
pub mod special;
mod tape;

pub use array::Array;
pub use special::{digamma, lgamma, softplus, student_t_cdf, student_t_quantile};
pub use tape::{autodiff_backward, Eval, Gradients, Ops, Tape, Unary, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("variable is not a differentiable leaf of this tape")]
    ForeignVar,
    #[error("array does not require gradients")]
    LeafWithoutGrad,
    #[error("{func} is undefined at {x}")]
    Domain { func: &'static str, x: f64 },
}
