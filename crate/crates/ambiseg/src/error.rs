//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric failure (NaN/Inf) during training or sampling.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A dataset or checkpoint header could not be parsed.
    #[error("corrupt header in {path}: {detail}")]
    CorruptHeader { path: String, detail: String },

    /// A data blob is shorter than its manifest promises.
    #[error("truncated blob in {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: String,
        expected: u64,
        found: u64,
    },

    /// An artifact was written by an incompatible format version.
    #[error("format version mismatch in {path}: found {found}, supported {supported}")]
    VersionMismatch {
        path: String,
        found: u32,
        supported: u32,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
