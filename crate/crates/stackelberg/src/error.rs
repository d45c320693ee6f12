use thiserror::Error;

/// Failure modes of the solver pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// A standing assumption checked by `validate_spec` failed.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A monitored positivity or conditioning requirement failed.
    #[error("{stage}: regularity lost at node {node}: {detail}")]
    Regularity {
        stage: String,
        node: usize,
        detail: String,
    },

    /// A backward or forward integration produced non-finite values.
    #[error("{stage}: non-finite value at node {node}")]
    BlowUp { stage: String, node: usize },

    /// Too many Monte Carlo paths diverged.
    #[error("simulation invalid: {0}")]
    Simulation(String),
}

impl Error {
    pub(crate) fn regularity(stage: &str, node: usize, detail: impl Into<String>) -> Self {
        Error::Regularity {
            stage: stage.to_string(),
            node,
            detail: detail.into(),
        }
    }

    pub(crate) fn blow_up(stage: &str, node: usize) -> Self {
        Error::BlowUp {
            stage: stage.to_string(),
            node,
        }
    }

    /// True for failures of the numerical pipeline, false for bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Regularity { .. } | Error::BlowUp { .. } | Error::Simulation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
