use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("missing LoRA adapter `{adapter}` for wrapped layer `{layer}`")]
    MissingAdapter { layer: String, adapter: String },

    #[error("invalid region: {0}")]
    Region(String),

    #[error("modality error: {0}")]
    Modality(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("missing blob {0}")]
    MissingBlob(PathBuf),

    #[error("blob {path}: {msg}")]
    Blob { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: body has {actual} bytes, manifest needs {needed}")]
    CheckpointTruncated { needed: u64, actual: u64 },

    #[error("checkpoint manifest: tensors `{first}` and `{second}` overlap")]
    CheckpointOverlap { first: String, second: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
