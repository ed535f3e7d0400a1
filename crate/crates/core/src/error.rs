use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume header: {0}")]
    Header(String),
    #[error("payload is {actual} bytes but the header declares {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("non-finite value {value} at voxel {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("coordinate {0:?} lies outside [-1, 1]^3")]
    OutOfDomain([f64; 3]),
    #[error("extent {lo:?}..={hi:?} does not fit dims {dims:?}")]
    ExtentOutOfBounds {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },
    #[error("singular grid transform (|det| = {0:e})")]
    SingularTransform(f64),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model file format error: {0}")]
    Format(String),
    #[error("model file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("batch size mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature density is zero over the whole batch")]
    DegenerateDensity,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("invalid decomposition: {0}")]
    Decomposition(String),
    #[error("brick {index} failed: {message}")]
    BrickFailed { index: usize, message: String },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid transfer function: {0}")]
    TransferFunction(String),
    #[error("invalid render config: {0}")]
    RenderConfig(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
