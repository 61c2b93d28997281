use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty sample set")]
    EmptySamples,

    #[error("negative regularization weight {0}")]
    NegativeLambda(f64),

    #[error("non-contractive shift: ||mu||_* = {norm} (need ||mu||_* < 1)")]
    NonContractive { norm: f64 },

    #[error("wrong regime: {0}")]
    WrongRegime(String),

    #[error("schedule/mode mismatch: {0}")]
    ScheduleModeMismatch(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
