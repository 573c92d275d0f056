//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: dimension {value} of axis `{axis}` is not divisible by {by}")]
    NotDivisible {
        context: &'static str,
        axis: &'static str,
        value: usize,
        by: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("label {label} out of range (num_classes = {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("non-finite value in `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
