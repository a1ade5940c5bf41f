use std::path::PathBuf;

/// Errors surfaced by the labeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid size: w={w}, l={l} (both must be positive and finite)")]
    InvalidSize { w: f64, l: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vehicles {a} and {b} overlap at t = 0")]
    VehicleOverlap { a: u64, b: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("query coordinate ({x}, {y}) outside feature map of {w}x{h}")]
    OutOfRange { x: f64, y: f64, w: usize, h: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("frame {0} is not in the scene")]
    MissingFrame(usize),

    #[error("trajectory {0} is not flagged static")]
    NotStatic(u64),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("bad scene store at {path}: {reason}")]
    BadStore { path: PathBuf, reason: String },

    #[error("link conflict: fragments {a} and {b} both cover frame {frame}")]
    LinkConflict { a: u64, b: u64, frame: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
