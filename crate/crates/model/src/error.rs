use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] spgnn_core::Error),
    #[error("{0}")]
    Precondition(String),
    #[error("image: {0}")]
    Image(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn precondition(msg: impl Into<String>) -> ModelError {
    ModelError::Precondition(msg.into())
}
