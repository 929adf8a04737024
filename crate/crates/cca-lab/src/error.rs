//! Error type shared by the whole crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped by what the caller can do
/// about them rather than by the module that raised them.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (bad key, bad value, bad range).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid argument to a library call (wrong length, unknown condition).
    #[error("invalid input: {0}")]
    Input(String),

    /// Mathematically undefined request (support mismatch, zero marginal).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Enumeration budget exceeded: the full sequence table would not fit.
    #[error(
        "enumeration budget exceeded: vocab_size={vocab_size}^seq_len={seq_len} \
         = {total} sequences > limit {limit}"
    )]
    BudgetExceeded {
        vocab_size: usize,
        seq_len: usize,
        total: u128,
        limit: u64,
    },

    /// Filesystem failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file did not parse or failed validation.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
