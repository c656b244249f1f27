//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by tensor ops, the model, datasets, training and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents (mismatched shapes, bad axes, kernels
    /// larger than their padded input, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Value outside the mathematical domain of an operation (log of a
    /// non-positive number, division by zero, non-finite loss, ...).
    #[error("numeric domain error: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed config file, CSV or manifest.
    #[error("parse error: {0}")]
    Parse(String),

    /// Call violated an operation's stated precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for usage/config problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Precondition(_) => 1,
            _ => 2,
        }
    }
}
