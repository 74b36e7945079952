use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("near-zero norm ({norm:e}) cannot be normalized")]
    ZeroNorm { norm: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("index {index} out of range for batch of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("zero distance between rows inside an active hinge term ({term})")]
    ZeroDistance { term: &'static str },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("split violation: {0}")]
    Split(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used to map errors to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::ZeroNorm { .. } | Error::NonFinite { .. } | Error::ZeroDistance { .. } => {
                ErrorKind::Numerical
            }
            Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Format { .. }
            | Error::Split(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn dims(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
