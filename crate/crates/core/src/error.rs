use thiserror::Error;
use xview_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid frame count {frames}: must satisfy F ≡ 1 (mod 4) and F ≥ 1")]
    InvalidLength { frames: usize },
    #[error("{what}: expected {expected}, got {actual}")]
    Shape { what: &'static str, expected: String, actual: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape { what, expected: format!("{expected:?}"), actual: format!("{actual:?}") }
}
