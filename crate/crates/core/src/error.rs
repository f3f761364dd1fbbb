use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("plant diverged at t = {time:.4} s: {detail}")]
    PlantDivergence { time: f64, detail: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trajectory generation exhausted after {attempts} attempts (last violation: {last})")]
    GenerationExhausted { attempts: usize, last: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("replay buffer holds {available} transitions, {requested} requested")]
    InsufficientData { available: usize, requested: usize },

    #[error("action safety violated: {0}")]
    SafetyViolation(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },

    #[error("malformed log or table: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::PlantDivergence { .. } => "plant_divergence",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::GenerationExhausted { .. } => "generation_exhausted",
            Error::NonFinite(_) => "non_finite",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::SafetyViolation(_) => "safety_violation",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingInput { .. } => "missing_input",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
