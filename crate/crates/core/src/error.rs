use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch, domain violation or otherwise malformed input.
    #[error("invalid input: {0}")]
    Input(String),

    /// A matrix that had to be factorized was not positive definite even after jitter.
    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    /// Re-conditioning or a redundant constraint made `F Σ Fᵀ` singular.
    #[error("constraint system is singular; dependent rows: {rows:?}")]
    SingularConstraint { rows: Vec<usize> },

    /// A non-finite value showed up in a quantity that must stay finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Newton iteration for the Laplace mode did not converge.
    #[error("Laplace mode search did not converge after {iterations} iterations (last step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    /// Malformed row while ingesting a data file.
    #[error("row {row}: {message}")]
    Ingest { row: usize, message: String },

    /// Training kept failing after every allowed restart.
    #[error("training failed after {restarts} restarts: {reason}")]
    Training { restarts: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures that a restart with fresh hyperparameters may cure.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::SingularConstraint { .. }
                | Error::NonFinite(_)
                | Error::NoConvergence { .. }
        )
    }
}
