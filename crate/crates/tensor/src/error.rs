use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}
