use thiserror::Error;

/// Errors raised by tensor construction, graph operations and the modules
/// built on top of them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: degenerate input: {reason}")]
    Degenerate { op: &'static str, reason: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is detached from every differentiable leaf (empty tape)")]
    EmptyTape,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("finite-difference oracle: {0}")]
    Oracle(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
