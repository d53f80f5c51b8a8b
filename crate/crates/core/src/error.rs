use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("single-class input")]
    SingleClass,

    #[error("no positive labels")]
    NoPositives,

    #[error("zero-variance input")]
    ZeroVariance,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-deterministic function: {0}")]
    NonDeterministic(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("{0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn out_of_range(what: &'static str, index: usize, limit: usize) -> Self {
        Error::OutOfRange { what, index, limit }
    }

    /// Short machine-parsable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SingleClass => "single_class",
            Error::NoPositives => "no_positives",
            Error::ZeroVariance => "zero_variance",
            Error::NonFinite(_) => "non_finite",
            Error::NonDeterministic(_) => "non_deterministic",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Malformed(_) => "malformed",
            Error::Mismatch(_) => "mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
