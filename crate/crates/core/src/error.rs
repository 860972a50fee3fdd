use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FpdError>;

#[derive(Debug, Error)]
pub enum FpdError {
    /// Input data that violates a documented precondition (e.g. joint outside the image).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Shapes, joint counts or tags that do not line up between two arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupted prediction: {0}")]
    CorruptedPrediction(String),

    #[error("degenerate confidence map for joint {joint}")]
    DegenerateMap { joint: usize },

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is incompatible (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl FpdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FpdError::Io {
            path: path.into(),
            source,
        }
    }
}
