use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An API was used out of order (e.g. stepping a finished episode).
    #[error("usage error: {0}")]
    Usage(String),

    /// Attempted write to an immutable offline buffer.
    #[error("offline buffer is immutable")]
    Immutable,

    /// Sampling had no episode long enough.
    #[error("no eligible data: {0}")]
    EmptyData(String),

    /// Malformed episode/checkpoint container.
    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    /// Shape mismatch between an input and a model.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite activations or losses.
    #[error("numeric error at {context}")]
    Numeric { context: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
