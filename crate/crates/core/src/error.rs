use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// Every variant has a short machine-friendly `kind()` so the CLI can emit
/// one-line parsable diagnostics.
#[derive(Debug, Error)]
pub enum IntentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IntentError {
    pub fn kind(&self) -> &'static str {
        match self {
            IntentError::Shape(_) => "shape",
            IntentError::InvalidArgument(_) => "invalid_argument",
            IntentError::InvalidImage(_) => "invalid_image",
            IntentError::Degenerate(_) => "degenerate",
            IntentError::NonFinite(_) => "non_finite",
            IntentError::Format { .. } => "format",
            IntentError::Missing(_) => "missing",
            IntentError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IntentError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = IntentError> = std::result::Result<T, E>;
