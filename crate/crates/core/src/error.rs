use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or a shape implied by the configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// A value that must be finite (or non-zero) is not.
    #[error("numeric error: {what}{}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Numeric { what: String, index: Option<usize> },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric {
            what: what.into(),
            index: None,
        }
    }

    pub fn numeric_at(what: impl Into<String>, index: usize) -> Self {
        Error::Numeric {
            what: what.into(),
            index: Some(index),
        }
    }

    pub fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
