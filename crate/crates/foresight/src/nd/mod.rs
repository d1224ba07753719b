//! Dense f64 tensors with a tape-based reverse-mode gradient engine.
//!
//! Everything differentiable in this crate is expressed as operations on a
//! [`Tape`]; [`check`] provides the finite-difference oracle used to validate
//! the analytic gradients.

pub mod check;
pub mod param;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, max_relative_error, numeric_gradient, GradCheckReport};
pub use param::Parameter;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("shape {shape:?} cannot hold {len} data elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expect}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expect: &'static str,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for dimension of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEps(f64),
}
