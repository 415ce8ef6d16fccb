use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SplatError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> SplatError {
    SplatError::InvalidParameter(msg.into())
}
