use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {message}")]
    Shape { node: usize, message: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("expected a scalar output, found shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operator is not positive definite: <p, H p> = {curvature:e} at iteration {iteration}; {advice}")]
    Indefinite {
        iteration: usize,
        curvature: f64,
        advice: String,
    },

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("integration blew up at step {step}")]
    BlowUp { step: usize },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}
