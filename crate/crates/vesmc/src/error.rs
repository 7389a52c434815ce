//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by schedule construction, sampling, and metric evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejected configuration (bad K, unordered sigmas, invalid weights, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Diffusion indices supplied out of order or out of range.
    #[error("index order violation: {0}")]
    IndexOrder(String),

    /// A schedule or kernel invariant does not hold at runtime.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// Schedule with eta = 0 where a positive inference std is required.
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    /// Observation unusable for the requested operation (e.g. sigma = 0 in a likelihood).
    #[error("degenerate observation: {0}")]
    DegenerateObservation(String),

    /// Noise level cannot be matched to any diffusion step.
    #[error("guidance infeasible: {0}")]
    GuidanceInfeasible(String),

    /// Every particle weight is -inf (or NaN); resampling is impossible.
    #[error("degenerate particle weights: {0}")]
    DegenerateWeights(String),

    /// A denoiser or kernel returned a state of the wrong shape.
    #[error("shape contract violation: expected {expected_l}x{expected_t}, got {got_l}x{got_t}")]
    ShapeMismatch {
        expected_l: usize,
        expected_t: usize,
        got_l: usize,
        got_t: usize,
    },

    /// Covariance not invertible even after regularization.
    #[error("singular moments: {0}")]
    SingularMoments(String),

    /// Metric undefined for the given inputs (e.g. R^2 against a constant target).
    #[error("undefined score: {0}")]
    UndefinedScore(String),

    /// Malformed serialized input (CSV, binary header, index list).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
