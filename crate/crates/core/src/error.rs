use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CaliperError>;

#[derive(Debug, Error)]
pub enum CaliperError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("incomplete landmark set for plane {plane}: missing caliper {missing}")]
    IncompleteSet { plane: String, missing: String },

    #[error("unknown landmark {name} for plane {plane}")]
    UnknownLandmark { plane: String, name: String },

    #[error("landmark {landmark} at ({x}, {y}) lies outside a {width}x{height} image")]
    OutOfBounds {
        landmark: String,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate channel: no landmark evidence (constant values)")]
    DegenerateChannel,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("ICC undefined: {0}")]
    UndefinedIcc(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("study {0} not found")]
    NotFound(String),

    #[error("revision conflict on study {study}: expected {expected}, current {current}")]
    Conflict { study: String, expected: u64, current: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CaliperError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CaliperError::Io {
            path: path.into(),
            source,
        }
    }
}
