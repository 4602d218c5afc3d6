use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced non-finite or otherwise unusable numbers.
    #[error("numeric diagnostic: {0}")]
    Numeric(String),

    /// A binary container failed to parse; `offset` is the first bad byte.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Bad run configuration (unknown key, unparsable value, missing file).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
