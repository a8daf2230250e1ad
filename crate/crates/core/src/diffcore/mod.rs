//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation applied through it; [`Tape::backward`]
//! replays the record in reverse, accumulating exact gradients by the chain
//! rule. The op inventory is deliberately small: just enough matrix/vector
//! algebra, activations, and log-space reductions to express a Bi-LSTM, the
//! attention residual, and the CRF forward recursion.
//!
//! A tape is single-use and confined to one thread for the duration of a
//! forward/backward pass. Tensors detached from any tape are immutable values
//! and safe to share across threads.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, CoordError, FiniteDiffReport, ParamCheck};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor};

/// Errors raised by tape operations and the gradient checker.
#[derive(Debug, Clone, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("log: input must be positive, got {value}")]
    LogDomain { value: f64 },
    #[error("exp: input {value} exceeds the f64 overflow bound {bound}")]
    ExpOverflow { value: f64, bound: f64 },
    #[error("{op}: input contains a non-finite value")]
    NonFiniteInput { op: &'static str },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("backward: root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root tensor is not recorded on this tape")]
    DetachedRoot,
    #[error("gradients: tensor was not recorded on the originating tape")]
    UnknownNode,
    #[error("finite_diff_check: step h must be in (0, 1e-3], got {h}")]
    InvalidStep { h: f64 },
    #[error("finite_diff_check: loss is not deterministic ({first} vs {second})")]
    NonDeterministicLoss { first: f64, second: f64 },
}
