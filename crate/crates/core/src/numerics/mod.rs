//! Dense float64 arrays with reverse-mode differentiation, sized for a small
//! transformer encoder, plus a central-difference gradient checker.
//!
//! Every primitive is recorded on a [`Tape`] together with whatever it needs
//! for its backward rule. Broadcasting is limited to adding a row-vector bias
//! ([`Tape::add_row`]); any other shape disagreement is an error.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOutcome};
pub use tape::{gelu_scalar, NodeId, OpKind, Record, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}: rank must be 1-3 with positive dimensions")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    RaggedRows,
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("non-finite gradient during backward")]
    NonFiniteGradient,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty selection")]
    EmptySelection,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("layer-norm epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    InvalidStep(f64),
    #[error("function returned {first} then {second} for identical input")]
    NonDeterministicFunction { first: f64, second: f64 },
}
