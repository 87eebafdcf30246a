use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss for feature {feature} at epoch {epoch}")]
    NonFiniteLoss { feature: usize, epoch: usize },

    #[error("non-finite objective at epoch {epoch}, batch {batch}")]
    NonFiniteObjective { epoch: usize, batch: usize },

    /// `history` holds the validation objective of every completed epoch.
    #[error("objective diverged ({value:e}) at epoch {epoch}")]
    Diverged {
        epoch: usize,
        value: f64,
        history: Vec<f64>,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("linear algebra: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics during fitting rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::NonFiniteObjective { .. }
                | Error::Diverged { .. }
                | Error::LinearAlgebra(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
