use std::path::PathBuf;

use thiserror::Error;
use tunes::TunesError;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] TunesError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The loss became NaN or infinite.
    #[error("training diverged at epoch {epoch}, video {video}: loss = {loss}")]
    Divergence { epoch: usize, video: String, loss: f64 },

    #[error("plot error: {0}")]
    Plot(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
