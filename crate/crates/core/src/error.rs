use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("future inputs exhausted")]
    ExhaustedFuture,
    #[error("solution fiber unresolved: {0}")]
    Unresolved(String),
    #[error("spectral radius estimate {0} is not below 1")]
    SpectralRadius(f64),
    #[error("echo state property failed on sampled input {index}: final diameter {diameter:e}")]
    EspFailure { index: usize, diameter: f64 },
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("singular innovation covariance at step {0}")]
    SingularInnovation(usize),
    #[error("covariance lost symmetry or positive semi-definiteness at step {0}")]
    CovarianceNotPsd(usize),
    #[error("particle weight collapse at step {step}: effective sample size {ess:.3}")]
    WeightCollapse { step: usize, ess: f64 },
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("inconsistent input marginal: distance {distance:e} exceeds threshold {threshold:e}")]
    InconsistentMarginal { distance: f64, threshold: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (divergence, unresolved
    /// fibers, filter breakdown) rather than by invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Unresolved(_)
                | Error::SpectralRadius(_)
                | Error::EspFailure { .. }
                | Error::Divergence(_)
                | Error::SingularInnovation(_)
                | Error::CovarianceNotPsd(_)
                | Error::WeightCollapse { .. }
        )
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
