//! IO, file formats, benchmarking and the CLI around `distillkit-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod manifest;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use thiserror::Error;

/// Errors raised by the IO layer and the CLI.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Core(#[from] distillkit_core::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

impl IoError {
    pub fn file(path: impl Into<String>, source: std::io::Error) -> IoError {
        IoError::File { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> IoError {
        IoError::Format { path: path.into(), message: message.into() }
    }
}
