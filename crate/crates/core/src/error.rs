use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on an extent.
    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    /// A structurally valid request with parameters that cannot produce output.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("network spec failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("checkpoint error for tensor `{tensor}`: {detail}")]
    Checkpoint { tensor: String, detail: String },

    #[error("pruning plan error: {0}")]
    Plan(String),

    #[error("rewrite error: {0}")]
    Rewrite(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes a shape error's context with the layer that raised it.
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Shape { context, detail } => Error::Shape {
                context: format!("{layer}/{context}"),
                detail,
            },
            other => other,
        }
    }
}
