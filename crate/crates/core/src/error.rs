use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GeoLinkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GeoLinkError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cannot sample {requested} points from a set of {available}")]
    BadSampleCount { requested: usize, available: usize },

    #[error("k = {k} exceeds the {available} reference points")]
    BadK { k: usize, available: usize },

    #[error("embedding width {0} is not divisible by 6")]
    BadDim(usize),

    #[error("{num_points} points cannot feed a {stages}-stage pyramid (need at least {required})")]
    TooFewPoints {
        num_points: usize,
        stages: usize,
        required: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("row {0} is the zero vector and cannot be normalized")]
    ZeroVector(usize),

    #[error("batch of {0} is too small, at least 2 rows are required")]
    BatchTooSmall(usize),

    #[error("batches are not aligned by scene id at row {row}: {left} vs {right}")]
    AlignmentError {
        row: usize,
        left: String,
        right: String,
    },

    #[error("query {0} has no ground-truth gallery match")]
    MissingGroundTruth(usize),

    #[error("split `{0}` has no queries or no gallery items")]
    EmptySplit(String),

    #[error("{}:{line}: {message}", file.display())]
    ParseError {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing view file {}", .0.display())]
    MissingView(PathBuf),

    #[error("invalid camera: {0}")]
    BadCamera(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image decoding failed: {0}")]
    Image(#[from] image::ImageError),
}
