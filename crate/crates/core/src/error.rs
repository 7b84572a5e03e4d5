use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could not reach mask ratio bucket {lower}%-{upper}% after {attempts} attempts")]
    BucketUnreachable { lower: u32, upper: u32, attempts: u32 },

    #[error("non-finite value in loss component `{component}` at step {step}")]
    NonFinite { component: &'static str, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
