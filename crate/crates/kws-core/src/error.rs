//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structural precondition on tensor contents or extents failed.
    #[error("invalid tensor argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Model or run configuration violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Audio input malformed or unusable.
    #[error("audio error: {0}")]
    Audio(String),

    /// Manifest row could not be ingested.
    #[error("manifest error at {path}:{row}: {msg}")]
    Manifest {
        path: String,
        row: usize,
        msg: String,
    },

    /// Checkpoint container malformed or inconsistent with its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (empty dataset, non-finite loss, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Evaluation corpus unusable.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// API misuse (out-of-order streaming feed, length mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to: 2 for input errors,
    /// 3 for state errors (checkpoint/config incompatibilities at load time).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}
