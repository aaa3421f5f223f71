use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by dataset, model, training, and RF pipeline code.
#[derive(Debug, Error)]
pub enum RclError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("detection error: {0}")]
    Detection(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("not found: {0}")]
    NotFound(String),
}

impl RclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RclError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category tag, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            RclError::Io { .. } => "io",
            RclError::Format(_) => "format",
            RclError::Config(_) => "config",
            RclError::Shape(_) => "shape",
            RclError::Numeric(_) => "numeric",
            RclError::Detection(_) => "detection",
            RclError::Argument(_) => "argument",
            RclError::NotFound(_) => "not-found",
        }
    }
}
