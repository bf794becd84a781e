use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called on a tensor with no recorded provenance")]
    NoProvenance,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed file name {path:?}: {reason}")]
    MalformedName { path: PathBuf, reason: String },

    #[error("data: {0}")]
    Data(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("training: {0}")]
    Training(String),

    #[error("image {path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoProvenance => "no_provenance",
            Error::Checkpoint(_) => "checkpoint",
            Error::MalformedName { .. } => "malformed_name",
            Error::Data(_) => "data",
            Error::Metrics(_) => "metrics",
            Error::Training(_) => "training",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
