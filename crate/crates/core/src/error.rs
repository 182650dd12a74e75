use thiserror::Error;

/// Errors raised by the solvers and statistics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value from {what} at node {node}, sample {sample}: point {point:?}")]
    NonFinite {
        what: &'static str,
        node: usize,
        sample: usize,
        point: Vec<f64>,
    },

    #[error("implicit step requires h*K < 1, got h*K = {0}")]
    PicardPrecondition(f64),

    #[error("Picard iteration did not converge at node {node} after {iterations} iterations (residual {residual:e})")]
    PicardDivergence {
        node: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("conditional expectation estimator failed: {reason} (samples {samples}, basis size {basis_size}, condition number {condition:e})")]
    Estimator {
        reason: String,
        samples: usize,
        basis_size: usize,
        condition: f64,
    },

    #[error("bundle file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}
