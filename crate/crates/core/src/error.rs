use thiserror::Error;

/// Errors raised by the alignment library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must satisfy x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("proposal {index} has no box, required by the spatial IoU metric")]
    MissingBox { index: usize },

    #[error("proposal {index} has no pseudo-label, required by class-aware grouping")]
    MissingLabel { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("source index {index} out of range for {n_sources} sources")]
    SourceOutOfRange { index: usize, n_sources: usize },

    #[error("cluster assignment does not partition {n} items: {reason}")]
    PartitionMismatch { n: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
