use thiserror::Error;

/// Errors produced by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("SVD did not converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("row {row} (line {line}), column '{column}': cannot parse '{value}' as a number")]
    CsvParse {
        row: usize,
        line: usize,
        column: String,
        value: String,
    },

    #[error("row {row} (line {line}), column '{column}': missing value")]
    CsvMissing {
        row: usize,
        line: usize,
        column: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("split '{split}' too short: {len} rows cannot hold a window of lookback {lookback} and horizon {horizon}")]
    SplitTooShort {
        split: &'static str,
        len: usize,
        lookback: usize,
        horizon: usize,
    },

    #[error("channel {channel} has zero variance in the training split")]
    ZeroVariance { channel: usize },

    #[error("horizon {horizon} is not divisible into {segments} segments")]
    Indivisible { horizon: usize, segments: usize },

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("layer '{0}' cannot be adapted: the decoder head and biases stay frozen")]
    FrozenByPolicy(String),

    #[error("segment plan expects a foundation head of {expected} steps but the foundation outputs {actual}")]
    PlanHeadMismatch { expected: usize, actual: usize },

    #[error("foundation model must be frozen before adaptation")]
    NotFrozen,

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    /// True for failures caused by inputs or configuration rather than a
    /// broken internal invariant.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::SvdNoConvergence { .. } | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
