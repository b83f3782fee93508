use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error in {path}: expected magic {expected}, {msg}")]
    Format {
        path: PathBuf,
        expected: String,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("inference failed for {failed} of {total} plots: {detail}")]
    InferenceBatch {
        failed: usize,
        total: usize,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Single-word machine-parsable category, used for CLI exit lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Lookup(_) => "lookup",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::InferenceBatch { .. } => "inference",
        }
    }
}
