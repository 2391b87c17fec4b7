use thiserror::Error;

/// Errors raised by the numerical kernels, the simulator and the learners.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("vector of length {0} is not the image of a square matrix")]
    NotPerfectSquare(usize),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("unstable dynamics: spectral radius {0} >= 1")]
    Unstable(f64),
    #[error("dimension {dim} exceeds the supported maximum {max}")]
    UnsupportedDimension { dim: usize, max: usize },
    #[error("(A, B) is not controllable")]
    Uncontrollable,
    #[error("Riccati iteration did not converge after {0} iterations")]
    RiccatiDivergence(usize),
    #[error("action block of the Q matrix is singular or indefinite")]
    IllConditioned,
    #[error("insufficient data: {0}")]
    InsufficientData(&'static str),
    #[error("infeasible horizon: {0}")]
    InfeasibleHorizon(&'static str),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
