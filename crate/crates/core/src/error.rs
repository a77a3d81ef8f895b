use std::path::PathBuf;

/// Errors raised anywhere in the detector stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or counts that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value outside the domain of the operation (negative variance, negative box size, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical evaluation produced NaN or infinity.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// The model is not in a state that allows the requested operation.
    #[error("state error: {0}")]
    State(String),
    /// Malformed checkpoint, dataset or prediction file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
