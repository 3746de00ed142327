use std::path::PathBuf;

use onh_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("ROI box (center {cx},{cy}, side {side}) exceeds image bounds {width}x{height}")]
    RoiOutOfBounds {
        cx: i64,
        cy: i64,
        side: i64,
        width: usize,
        height: usize,
    },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("image {0} is already normalized")]
    AlreadyNormalized(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("inpainting mask covers every pixel")]
    FullMask,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
    #[error("instance of {pixels} pixels exceeds the exact-evaluation cap of {cap}")]
    TooLarge { pixels: usize, cap: usize },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
