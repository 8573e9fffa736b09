use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GtsaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty rectangle {0:?}")]
    EmptyRect([f64; 4]),

    #[error("rect {rect:?} does not intersect crop {crop:?}")]
    NoIntersection { rect: [f64; 4], crop: [f64; 4] },

    #[error("odd rotation (k={k}) of a non-square {h}x{w} grid")]
    NonSquareRotation { k: u8, h: usize, w: usize },

    #[error("rotation label {0} outside 0..4")]
    BadLabel(usize),

    #[error("image is {w}x{h}, smaller than the minimum {min}px")]
    ImageTooSmall { w: usize, h: usize, min: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated: expected {expected} bytes of array data, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl GtsaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        GtsaError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GtsaError>;
