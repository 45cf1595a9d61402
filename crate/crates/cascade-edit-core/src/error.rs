//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something that violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A required upstream checkpoint is missing for the requested stage.
    #[error("missing dependency: stage '{0}' requires a trained {1} checkpoint")]
    Dependency(String, String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 2 usage/invalid argument, 3 missing
    /// dependency, 4 divergence, 5 i/o and file-format trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Dependency(_, _) => 3,
            Error::Divergence(_) => 4,
            Error::Io(_) | Error::Json(_) | Error::Image(_) | Error::Checkpoint(_) => 5,
        }
    }
}
