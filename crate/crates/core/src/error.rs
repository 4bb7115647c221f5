use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the kernel-modulation engine.
#[derive(Debug, Error)]
pub enum KmError {
    /// Two shapes disagree along the named axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside its valid domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data file does not have the expected record layout.
    #[error("malformed data file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A serialized payload could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    /// A delta does not belong to the base network it is applied to.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training diverged.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl KmError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        KmError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KmError>;
