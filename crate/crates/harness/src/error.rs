use std::path::PathBuf;

use thiserror::Error;
use xview_core::Task;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] xview_gridworld::GridError),
    #[error(transparent)]
    Model(#[from] xview_core::Error),
    #[error(transparent)]
    Tensor(#[from] xview_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint was trained for {trained}, but {requested} was requested")]
    DirectionMismatch { trained: Task, requested: Task },
    #[error("non-finite loss in {phase} phase at step {step}: {detail}")]
    NonFinite { phase: &'static str, step: usize, detail: String },
    #[error("{path}: refusing to overwrite existing file (use --force)")]
    Exists { path: PathBuf },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
