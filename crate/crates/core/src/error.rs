use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("sequence length error: step {step} requested but only {available} frames are available")]
    SequenceLength { step: usize, available: usize },
    #[error("vertex count mismatch in {}: expected {expected}, found {found}", path.display())]
    VertexCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("corrupt header in {}: {reason}", path.display())]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Topology(_) | Error::Json(_) => ErrorClass::Config,
            Error::Io(_)
            | Error::Wav(_)
            | Error::MissingFile(_)
            | Error::CorruptHeader { .. }
            | Error::VertexCount { .. }
            | Error::Checkpoint(_) => ErrorClass::Io,
            Error::Numeric(_) | Error::Tensor(_) => ErrorClass::Numeric,
            Error::Input(_) | Error::SequenceLength { .. } => ErrorClass::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
