use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum QuanError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },
    #[error("range error: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("backward called before a training-mode forward pass in {0}")]
    NoForward(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QuanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        QuanError::Format {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, QuanError>;
