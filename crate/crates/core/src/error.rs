use thiserror::Error;

/// Errors produced by the numerical and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemixError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate residual mass {residual:e} after drawing {drawn} indices")]
    DegenerateResidual { residual: f64, drawn: usize },
    #[error("ESS undefined for an all-zero weight vector")]
    EssUndefined,
    #[error("leave-one-out baseline undefined for {0} rollouts (need at least 2)")]
    TooFewRollouts(usize),
    #[error("enumeration budget exceeded: {size} > {budget}")]
    EnumerationBudget { size: u128, budget: u128 },
    #[error("quadrature did not converge: error estimate {estimate:e} > tolerance {tol:e} after {intervals} intervals")]
    Quadrature { estimate: f64, tol: f64, intervals: usize },
    #[error("cache was produced by a {found} forward pass, expected {expected}")]
    CacheMode { expected: &'static str, found: &'static str },
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, RemixError>;
