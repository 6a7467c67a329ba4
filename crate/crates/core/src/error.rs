use thiserror::Error;

use crate::expr::ExprError;
use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FloquetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("trapezoidal step matrix is numerically singular at s = {s}")]
    SingularStep { s: f64 },
    #[error("matrix is numerically singular: {0}")]
    SingularMatrix(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("iteration diverged after {iterations} steps (residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("iteration stagnated after {iterations} steps (residual {residual:e})")]
    Stagnated { iterations: usize, residual: f64 },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("no eigenvalue candidates found")]
    NoCandidates,
    #[error("problem of size {size} exceeds the dense limit {limit}")]
    TooLargeForDirect { size: usize, limit: usize },
    #[error("no dual eigenvalue within {tol:e} of {target}")]
    PairingFailed { target: String, tol: f64 },
    #[error("eigenvalue is close to defective (denominator {denominator:e})")]
    NearDefective { denominator: f64 },
    #[error("line search failed: {0}")]
    LineSearchFailed(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = FloquetError> = std::result::Result<T, E>;
