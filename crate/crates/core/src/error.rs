use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum NarvidError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric-domain error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("corrupt payload in episode `{episode}`: {detail}")]
    Corruption { episode: String, detail: String },
}

impl NarvidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NarvidError::Io { path: path.into(), source }
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            NarvidError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = NarvidError> = std::result::Result<T, E>;
