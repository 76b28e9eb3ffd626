use thiserror::Error;

use crate::tensor::TensorError;

/// Errors raised while building or running the model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lexical error: unknown token {0:?}")]
    Lexical(String),
    #[error("internal wiring error: {0}")]
    Wiring(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
