use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("interactive model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid prompts: {0}")]
    InvalidPrompts(String),

    #[error("relevance for prompt {prompt:?} contains non-finite values")]
    NonFiniteRelevance { prompt: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("view set is empty")]
    EmptyViewSet,

    #[error("invalid crop grid: {0}")]
    InvalidGrid(String),

    #[error("no category produced a usable relevance map")]
    NoSignal,

    #[error("relevance channel {0} is empty; use the low-confidence path")]
    EmptyChannel(usize),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("dataset format: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Zip(#[from] zip::result::ZipError),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
}

pub type Result<T> = std::result::Result<T, Error>;
