use thiserror::Error;

/// Errors raised by the optimization core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Step outside the range where the proximal map is single valued.
    #[error("step {alpha} outside validity range (0, {limit})")]
    StepOutOfRange { alpha: f64, limit: f64 },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("{solver} did not converge within {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// The outer loop was asked to accept an iterate without a certificate.
    #[error("uncertified inner solve at iteration {iteration}: {source}")]
    Uncertified {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing snapshot for iterate {0}")]
    MissingSnapshot(usize),

    #[error("nonpositive value {value:e} at k = {k} inside the fit window")]
    NonPositiveSeries { k: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
