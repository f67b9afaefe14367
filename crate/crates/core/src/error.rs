use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design {0:?} lies outside the design domain")]
    OutsideDesignDomain(Vec<f64>),

    #[error("input {0:?} lies outside the surrogate training domain")]
    Extrapolation(Vec<f64>),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("conductivity tensor is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("electrode currents violate Kirchhoff's law (sum = {0:e})")]
    KirchhoffViolation(f64),

    #[error("training produced a non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("surrogate accuracy not reached: relative RMS {achieved:.4e} > {threshold:.4e}")]
    AccuracyNotReached { achieved: f64, threshold: f64 },

    #[error("design optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// `true` for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NotPositiveDefinite(_)
                | Error::NonFiniteLoss { .. }
                | Error::AccuracyNotReached { .. }
                | Error::Diverged { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
