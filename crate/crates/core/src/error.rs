use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("period must be positive, got {0}")]
    NonPositivePeriod(f64),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },

    #[error("reference mode failed certification: {0}")]
    Certification(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
