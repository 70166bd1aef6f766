use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters or geometry.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed file: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("non-finite gradient at epoch {epoch} in parameter `{param}`")]
    NonFiniteGradient { epoch: usize, param: String },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_) | Error::Usage(_) | Error::Format { .. })
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
