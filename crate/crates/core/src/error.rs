use thiserror::Error;

use crate::config::ConfigError;
use crate::tensor::TensorError;

/// Failures of model construction and forward passes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
