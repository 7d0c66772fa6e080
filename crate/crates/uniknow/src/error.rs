//! Error types shared across the harness.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data: bad header line, unparseable record, wrong schema.
    #[error("data format error: {0}")]
    Format(String),

    /// Precondition or configuration violations.
    #[error("validation error: {0}")]
    Validation(String),

    /// Transport-level failure after the bounded retry policy was exhausted.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// The endpoint answered but the body did not match the wire protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Remote relevance scorer failed; callers may fall back to lexical scoring.
    #[error("relevance scorer failure: {0}")]
    Scorer(String),

    /// A sampling pool was too small for the requested draw.
    #[error("insufficient pool for {what}: needed {needed}, available {available}")]
    InsufficientPool {
        what: String,
        needed: usize,
        available: usize,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 transport, 4 data format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::InsufficientPool { .. } => 2,
            Error::Transport { .. } | Error::Protocol(_) | Error::Scorer(_) => 3,
            Error::Io { .. } | Error::Format(_) => 4,
        }
    }
}
