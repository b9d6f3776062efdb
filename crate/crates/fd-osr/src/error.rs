use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load dataset file {path}: {reason}")]
    DataLoad { path: PathBuf, reason: String },

    #[error("open-set split requires at least 7 classes, dataset has {0}")]
    TooFewClasses(usize),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("transformation index {index} out of range (M = {m})")]
    TransformOutOfRange { index: usize, m: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
