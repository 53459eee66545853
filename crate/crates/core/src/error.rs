use std::io;

/// Errors raised by the registration engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate")]
    InvalidCoordinate,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("volume below MIND minimum size")]
    MindTooSmall,

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFiniteLoss {
        iteration: usize,
        breakdown: String,
        /// CSV of the loss trace up to the failure.
        trace: String,
    },

    #[error("non-finite parameters: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
