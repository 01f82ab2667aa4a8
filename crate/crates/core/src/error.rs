use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PvcError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PvcError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PvcError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PvcError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or by unreadable/mismatched
    /// artifacts, as opposed to bad arguments.
    pub fn is_io(&self) -> bool {
        matches!(self, PvcError::Io { .. } | PvcError::Format { .. })
    }
}

pub type Result<T> = std::result::Result<T, PvcError>;
