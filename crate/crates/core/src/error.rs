use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("graph already consumed by a backward pass; run a new forward pass")]
    GraphConsumed,
    #[error("unknown model name `{0}` (expected mlp-small, mlp-wide or conv-small)")]
    UnknownModel(String),
    #[error("inconsistent input shape: {0}")]
    InputShape(String),
    #[error("retained percentage must lie in (0, 100], got {0}")]
    Retain(f64),
    #[error("mask has no active prunable entries")]
    EmptyMask,
    #[error("warm-up length k={k} exceeds recipe length of {epochs} epochs")]
    WarmupTooLong { k: usize, epochs: usize },
    #[error("no checkpoint recorded for epoch {0}")]
    MissingCheckpoint(usize),
    #[error("ledger phase without a tag (index {0})")]
    UntaggedPhase(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("config constraint violations:\n  - {}", .0.join("\n  - "))]
    ConfigViolations(Vec<String>),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path { path: path.into(), source }
    }
}
