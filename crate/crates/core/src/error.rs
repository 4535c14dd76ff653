//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by problem construction, flow evaluation, integration and
/// the experiment runner.
#[derive(Debug, Error)]
pub enum FlowError {
    /// A vector or matrix argument has the wrong dimension.
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// A NaN or infinity was produced; `term` names the offending quantity.
    #[error("non-finite value in {term} at t = {t}")]
    NonFinite { term: &'static str, t: f64 },

    /// The KKT matrix [[Q, A^T], [A, 0]] is singular or rank-deficient.
    #[error("singular KKT system: rank {rank} of {size} (A must have full row rank and Q must be positive definite on ker A)")]
    SingularKkt { rank: usize, size: usize },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Adaptive quadrature did not converge.
    #[error("quadrature failed: {0}")]
    Quadrature(String),

    /// A rate fit had too few usable points or zero spread.
    #[error("degenerate rate fit: {0}")]
    DegenerateFit(String),

    /// The experiment config failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// Guarantee mode rejected the run because the scaling condition
    /// (β' ≤ (1 − κ)(1/δ)β together with 1/δ < γ) fails.
    #[error("scaling condition violated (requires beta' <= (1 - kappa) * beta / delta and gamma * delta > 1): worst margin {worst_margin:.6e} at t = {worst_t}")]
    ScalingViolation { worst_margin: f64, worst_t: f64 },

    /// The integration exceeded its step budget before reaching the horizon.
    #[error("integration aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
