use thiserror::Error;

/// Errors raised by the quadrature, network and training layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller supplied an argument outside the documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The integrand returned a non-finite value.
    #[error("integrand returned {value} at point {point:?}")]
    Evaluation { point: Vec<f64>, value: f64 },

    /// A loss (or its gradient) became non-finite during training.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
