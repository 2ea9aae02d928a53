//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the public API.
#[derive(Debug, Error)]
pub enum ExonError {
    /// Caller violated a documented precondition (shape mismatch, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed or inconsistent configuration file.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset files missing, corrupt, or failing checksum verification.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint directory missing, incomplete, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl ExonError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ExonError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ExonError>;
