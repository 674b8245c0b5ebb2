use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("derivative of order {order} with step {step} needs more than {bands} bands")]
    InsufficientBands { order: usize, step: usize, bands: usize },

    #[error("invalid cube: {0}")]
    InvalidCube(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible scene: {0}")]
    InfeasibleSpec(String),

    #[error("header mismatch for {path}: {reason}")]
    HeaderMismatch { path: PathBuf, reason: String },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("class {0} has no labeled pixels")]
    EmptyClass(u16),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("spatial dims too small to downsample: {height}x{width}")]
    TooSmall { height: usize, width: usize },

    #[error("spatial mismatch: {0:?} vs {1:?}")]
    SpatialMismatch((usize, usize), (usize, usize)),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no labeled pixels to evaluate the loss on")]
    NoLabeledPixels,

    #[error("evaluation region contains no labeled pixels")]
    EmptyRegion,

    #[error("training diverged at step {step}: non-finite loss")]
    DivergenceDetected {
        step: usize,
        /// Losses of the steps completed before divergence.
        trace: Vec<crate::losses::LossBreakdown>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Png(#[from] png::EncodingError),
}
