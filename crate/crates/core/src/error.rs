use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for the experiment engine.
///
/// Variants map onto the CLI exit-code table: parameter/config errors
/// exit with 2, data/format errors with 3, numeric/training errors
/// with 4, and I/O errors with 5.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) => 2,
            Error::Format(_) | Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 5,
        }
    }

    /// Wrap an I/O error with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
