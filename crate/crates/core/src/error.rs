use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A weights file failed validation. `field` names the offending part of
    /// the record layout.
    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("{format} decode error: {reason}")]
    Decode { format: &'static str, reason: String },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("ROI error: {0}")]
    Roi(String),

    #[error("model mismatch: expected `{expected}` model, found `{found}`")]
    SpecMismatch { expected: String, found: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
