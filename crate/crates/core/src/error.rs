use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero (or near-zero) L2 norm")]
    ZeroNormRow(usize),

    #[error("invalid cluster count {requested} for {classes} classes")]
    InvalidClusterCount { requested: usize, classes: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("empty cluster")]
    EmptyCluster,

    #[error("no prototype for class {0}")]
    MissingPrototype(u32),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("invalid imbalance parameters: {0}")]
    InvalidImbalance(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// A loss became non-finite; carries the per-step history up to the
    /// aborted step so callers can inspect the run.
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected {
        step: usize,
        history: Vec<LossBreakdown>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
