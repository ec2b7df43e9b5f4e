use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported channel count {0}, expected 1 or 3")]
    UnsupportedChannels(usize),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index error: {0}")]
    StepIndex(String),

    #[error("division guard: sigma is zero at step {0}")]
    DivisionGuard(usize),

    #[error("denoiser error: {0}")]
    Denoiser(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("query row {0} admits no keys")]
    EmptyRow(usize),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("mask selects no entries")]
    EmptyMask,

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid camera path: {0}")]
    Path(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
