use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FttnError>;

#[derive(Debug, Error)]
pub enum FttnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FttnError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        FttnError::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FttnError::Io {
            path: path.into(),
            source,
        }
    }
}
