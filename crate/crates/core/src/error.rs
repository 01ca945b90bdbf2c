use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    /// Stable lower-case tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config { .. } => "config",
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::NonFinite(_) => "non_finite",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io(_) => "io",
        }
    }

    /// Prefixes parse and I/O errors with the file they came from.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse { offset, msg } => Error::parse(offset, format!("{}: {msg}", path.display())),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
