use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: unsupported image format: {message}")]
    UnsupportedFormat { path: PathBuf, message: String },

    #[error("{path}: cannot encode image: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("style id {style_id} out of range for {n_styles} style(s)")]
    StyleOutOfRange { style_id: usize, n_styles: usize },

    #[error("invalid top-k count {k} for an image with {pixels} pixel(s)")]
    InvalidTopK { k: usize, pixels: usize },

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: u64 },

    #[error("{path}: bad checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: bad weights file: {message}")]
    Weights { path: PathBuf, message: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: bad detections file: {message}")]
    Detections { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, manifests, arguments)
    /// rather than failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::Config(_)
                | Error::StyleOutOfRange { .. }
                | Error::InvalidTopK { .. }
                | Error::InvalidBox(_)
        )
    }
}
