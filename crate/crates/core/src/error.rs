use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("unknown split `{0}` (expected `train` or `test`)")]
    UnknownSplit(String),
    #[error("unknown layout id {0}")]
    UnknownLayout(usize),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checksum mismatch for {path}: manifest {expected:08x}, file {found:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("dataset is inconsistent: {0}")]
    Dataset(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] fusion_grad::GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FusionError>;
