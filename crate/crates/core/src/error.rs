use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate vector: norm {norm:e} is too small to normalize")]
    Degenerate { norm: f64 },
    #[error("out of bounds: {0}")]
    Bound(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("attention row {row} is fully masked")]
    Masking { row: usize },
    #[error("every target position is ignored; the mean loss is undefined")]
    UndefinedMean,
    #[error("no concept candidates found in the corpus")]
    EmptyVocabulary,
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("sequence needs {needed} rows but the decoder holds at most {max_len}")]
    Capacity { needed: usize, max_len: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("failed to embed {phrase:?}: {source}")]
    Embed {
        phrase: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Degenerate { .. } | Error::Numeric(_) | Error::UndefinedMean => ErrorKind::Numeric,
            Error::Argument(_) => ErrorKind::Usage,
            Error::Embed { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
