use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the downscaling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A query or target fell outside the coverage of a grid.
    #[error("domain error: {0}")]
    Domain(String),

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inconsistent configuration (missing stats, bad net config, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or field shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was invoked on stale or missing state.
    #[error("state error: {0}")]
    State(String),

    /// A file did not match its binary or text format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A non-finite value appeared during an iterative computation.
    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
