use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("non-finite value at integrator step {step}")]
    NumericDivergence { step: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDivergence { step: usize, loss: f64 },
    #[error("guidance weights are degenerate: every cost is infinite")]
    DegenerateWeights,
    #[error("absolute continuity violated at support index {index}")]
    AbsoluteContinuity { index: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
