use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("batch norm running statistics for {0} were never updated")]
    UninitializedRunningStats(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} outside 0..{way}")]
    LabelOutOfRange { label: usize, way: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("manifest not found: {}", .0.display())]
    ManifestNotFound(PathBuf),

    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("image file not found: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("cannot decode image {}: {source}", path.display())]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("split {split} has {found} classes, expected {expected}")]
    ClassCount {
        split: String,
        found: usize,
        expected: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient of {0} contains NaN")]
    NanGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
