use std::path::PathBuf;

/// Errors surfaced by the library. The CLI maps each variant onto an exit
/// category.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric divergence at stage {stage}, iteration {iteration}: {what}")]
    Divergence {
        stage: usize,
        iteration: usize,
        what: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("incompatible artifact format `{found}` (expected `{expected}`)")]
    Incompatible { found: String, expected: String },

    #[error("corrupt checkpoint {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },

    #[error("internal contract violation: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
