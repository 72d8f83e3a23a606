//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl EnhanceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EnhanceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for anything the user can fix
    /// up front, 3 for failures that surface mid-run.
    pub fn exit_code(&self) -> i32 {
        match self {
            EnhanceError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, EnhanceError>;
