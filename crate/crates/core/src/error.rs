use thiserror::Error;

/// Errors produced by the beamforming library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (apply diagonal loading or increase the regularization)")]
    NotPositiveDefinite,

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("unexpected data state: {0}")]
    State(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::NotPositiveDefinite => "NOT_POSITIVE_DEFINITE",
            Error::OutOfRange { .. } => "OUT_OF_RANGE",
            Error::Degenerate(_) => "DEGENERATE",
            Error::State(_) => "BAD_STATE",
            Error::Format(_) => "BAD_FORMAT",
            Error::Config(_) => "BAD_CONFIG",
            Error::Io(_) => "IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
