use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("treatment error at row {row}: value {value:?} is not 0 or 1")]
    Treatment { row: usize, value: String },

    #[error("data error at row {row}, column {column:?}: {reason}")]
    Data {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("arm {arm} has no units")]
    EmptyArm { arm: u8 },

    #[error("dataset too small: {0}")]
    TooSmall(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unit {unit} needs {needed} matches but the opposite arm has {available} units")]
    InsufficientMatches {
        unit: usize,
        needed: usize,
        available: usize,
    },

    #[error("no unit has z equal to {z}")]
    EmptyCell { z: f64 },

    #[error("bandwidth error: {0}")]
    Bandwidth(String),

    #[error("design matrix is rank deficient ({rows} rows, {cols} columns)")]
    Rank { rows: usize, cols: usize },

    #[error("fold {fold} has no units in arm {arm}")]
    Fold { fold: usize, arm: u8 },

    #[error("subsample error: {0}")]
    Subsample(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl GateError {
    /// True for errors caused by the input data rather than numerics or configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            GateError::Schema(_)
                | GateError::Treatment { .. }
                | GateError::Data { .. }
                | GateError::EmptyArm { .. }
                | GateError::TooSmall(_)
                | GateError::InsufficientMatches { .. }
                | GateError::Io(_)
        )
    }

    /// True for errors that come from usage or configuration mistakes.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, GateError::Config(_))
    }
}

impl From<std::io::Error> for GateError {
    fn from(e: std::io::Error) -> Self {
        GateError::Io(e.to_string())
    }
}

impl From<csv::Error> for GateError {
    fn from(e: csv::Error) -> Self {
        GateError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GateError>;
