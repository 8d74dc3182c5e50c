use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    /// `minor` is the order (1-based) of the first leading minor that is not positive.
    #[error("matrix is not positive definite (leading minor {minor} of {size})")]
    NotPositiveDefinite { minor: usize, size: usize },
    #[error("triangular matrix is singular at diagonal entry {0}")]
    Singular(usize),
    #[error("variable is not a leaf of this tape")]
    UnknownLeaf,
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("problem too large for explicit computation: {0}")]
    TooLarge(String),
    #[error("step produced an invalid distribution: {0}")]
    StepInvalid(String),
    #[error("step failed after {rejections} rejections: {reason}")]
    StepFailed { rejections: usize, reason: String },
    #[error("invalid bracket [{lo}, {hi}]")]
    BracketInvalid { lo: f64, hi: f64 },
    #[error("unsupported observation {y} for {likelihood} likelihood")]
    UnsupportedObservation { y: f64, likelihood: &'static str },
    #[error("index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
