//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and
//! replayed in reverse by [`Tape::backward`]. [`finite_difference_grad`]
//! is the independent oracle used to check every backward rule.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use tape::{Axis, OpKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must have shape [1], got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable belongs to tape {found}, expected tape {expected}")]
    TapeMismatch { expected: u64, found: u64 },
    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    Invalid(String),
}
