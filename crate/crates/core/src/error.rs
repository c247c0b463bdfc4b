use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("video {id} has {frames} frames, need at least {needed} for T={t}, stride={stride}")]
    VideoTooShort {
        id: String,
        frames: usize,
        needed: usize,
        t: usize,
        stride: usize,
    },

    #[error("geometry infeasible: {0}")]
    Geometry(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
