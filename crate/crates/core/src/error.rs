use thiserror::Error;

use crate::solver::SolveStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported polynomial degree {degree} (supported: {supported})")]
    UnsupportedDegree { degree: usize, supported: &'static str },

    #[error("maximum-likelihood fit failed: {reason} (best log-likelihood {loglik:.6e}, gradient norm {grad_norm:.3e}, {iterations} iterations)")]
    Fit {
        reason: String,
        loglik: f64,
        grad_norm: f64,
        iterations: usize,
    },

    #[error("convexity gate failed: {0}")]
    Convexity(String),

    #[error("constraint build failed: {0}")]
    Build(String),

    #[error("degenerate quantile: {0}")]
    DegenerateQuantile(String),

    #[error("solver failure during {stage}: status {status:?}")]
    Solver { stage: String, status: SolveStatus },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
