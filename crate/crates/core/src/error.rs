use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid stream: {0}")]
    Stream(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Domain { .. } | Error::Shape { .. } | Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
