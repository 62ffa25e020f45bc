use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("invalid window: t_end ({t_end}) must exceed t_start ({t_start})")]
    InvalidWindow { t_start: f64, t_end: f64 },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("ELBO decreased by {drop:e} at sweep {sweep}")]
    MonotonicityViolation { sweep: usize, drop: f64 },

    #[error("test data contains no spikes")]
    NoSpikes,

    #[error("cell {cell} spikes in the test set but has zero training rate")]
    ZeroRateWithSpikes { cell: usize },

    #[error("state {state} carries marginal mass but has no training location")]
    UncoveredState { state: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::MonotonicityViolation { .. } => 3,
            Error::FileNotFound(_) | Error::Io(_) => 4,
            _ => 2,
        }
    }
}
