use thiserror::Error;

use crate::mesh::BoundaryTag;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no boundary data for facets tagged {0:?}")]
    MissingBoundaryData(BoundaryTag),

    #[error("matrix is singular (pivot {pivot})")]
    SingularMatrix { pivot: usize },

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("solver failure at step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing run history: {0}")]
    MissingHistory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the linear algebra (as opposed to bad input).
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::SingularMatrix { .. } | Error::NotConverged { .. } => true,
            Error::StepFailed { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
