//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StmError {
    /// A mathematical operation has no defined result (e.g. softmax with no
    /// unmasked entry).
    #[error("domain error: {0}")]
    Domain(String),

    /// The caller violated an API precondition (shape mismatch, non-scalar
    /// backward root, bad argument).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is malformed or violates an instance invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Two pieces of caller-supplied state disagree (e.g. step count vs
    /// label arity).
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration is invalid or infeasible.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StmError>;
