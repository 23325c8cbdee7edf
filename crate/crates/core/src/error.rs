use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at node {node} while computing {what}")]
    BlowUp { what: &'static str, node: usize },

    #[error("unsupported cost: {0}")]
    UnsupportedCost(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("no convergence after {iterations} iterations (best residual {best_residual:e})")]
    NoConvergence {
        iterations: usize,
        best_residual: f64,
    },

    #[error("path file: {0}")]
    PathFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
