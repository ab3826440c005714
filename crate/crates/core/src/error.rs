use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("malformed PLY: {0}")]
    MalformedPly(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {width}x{height} is smaller than the 32x32 minimum")]
    TooSmall { width: usize, height: usize },
    #[error("scene has no Gaussians")]
    EmptyScene,
    #[error("no foreground pixels in any capture mask")]
    NoForeground,
    #[error("{stage} diverged at step {step}: loss {loss}")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: f64,
    },
    #[error("{0} already holds a corpus with a different generator version")]
    ManifestConflict(PathBuf),
    #[error("manifest validation failed for {path}: {reason}")]
    ManifestInvalid { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
