use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed binary payload; `offset` is the byte offset of the bad record.
    #[error("parse error at byte {offset}: {msg}")]
    ParseAt { offset: usize, msg: String },

    /// Malformed text input; `line` is 1-based.
    #[error("parse error on line {line}: {msg}")]
    ParseLine { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("video {0} has no evaluable frames (all frames absent)")]
    AllFramesAbsent(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad arguments.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::ParseAt { .. }
                | Error::ParseLine { .. }
                | Error::Validation(_)
                | Error::AllFramesAbsent(_)
                | Error::Io { .. }
        )
    }
}
