use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid motion vector: {0}")]
    InvalidMotion(String),

    /// Malformed binary input. `offset` is the byte position where decoding failed.
    #[error("{what}: malformed input at byte {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    /// A CNN weight file that does not describe a usable network.
    #[error("model format error at byte {offset}: {reason}")]
    ModelFormat { offset: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("pixel ({x}, {y}) is outside the {width}x{height} field")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("pixel ({x}, {y}) is not covered by any patch")]
    Uncovered { x: usize, y: usize },

    #[error("incomplete input: {0}")]
    IncompleteInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn format(what: &'static str, offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
