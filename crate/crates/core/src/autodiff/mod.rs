//! Minimal reverse-mode automatic differentiation sized for the fixed
//! two-stage architecture: dense tensors, a per-pass op tape, and a
//! finite-difference gradient checker.
//!
//! Tapes are rebuilt every forward pass. A tape and its tensors belong to one
//! thread for the duration of a forward/backward pass; distinct passes on
//! distinct tapes may run concurrently over shared read-only parameters.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use real::Real;
pub use tape::{Gradients, NodeId, SourceRows, Tape};
pub use tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("index {index} out of range ({len}) in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value produced by {context}")]
    NonFiniteValue { context: &'static str },
}
