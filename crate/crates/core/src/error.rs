use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported norm: {0} (supported: 1, 2, inf)")]
    UnsupportedNorm(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("format version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::UnsupportedNorm(_) => "unsupported_norm",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Consistency(_) => "consistency",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
