use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: {field} mismatch: expected {expected}, found {actual}")]
    Mismatch { path: PathBuf, field: &'static str, expected: String, actual: String },
    #[error("{path}: refusing to write into non-empty directory (use force)")]
    NotEmpty { path: PathBuf },
}

pub type Result<T> = std::result::Result<T, GridError>;
