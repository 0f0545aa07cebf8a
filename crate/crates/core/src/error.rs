use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the gaze pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask: no masked positions to normalize by")]
    EmptyMask,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("frozen parameter `{0}` received a gradient")]
    FrozenGradient(String),

    #[error("corrupt weight file: {0}")]
    Corrupt(String),

    #[error("unsupported weight file: {0}")]
    Version(String),

    #[error("parameter names differ: {0}")]
    NameSet(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
