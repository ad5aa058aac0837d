use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("layer {layer} ({name}): shape mismatch: {detail}")]
    ShapeMismatch {
        layer: usize,
        name: String,
        detail: String,
    },

    #[error("layer {layer} ({name}): checksum mismatch for blob {blob}")]
    Checksum {
        layer: usize,
        name: String,
        blob: String,
    },

    #[error("layer {layer} ({name}): invalid value: {detail}")]
    Validation {
        layer: usize,
        name: String,
        detail: String,
    },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing quantization parameters for layer {0}")]
    MissingQuantParams(String),

    #[error("accumulator overflow in layer {0}")]
    Overflow(String),

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

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest(_) => "manifest",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Checksum { .. } => "checksum",
            Error::Validation { .. } => "validation",
            Error::Format(_) => "format",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingQuantParams(_) => "missing_qparams",
            Error::Overflow(_) => "overflow",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
