use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid UTF-8 at line {line}")]
    InvalidEncoding { line: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: {message}")]
    Format { location: String, message: String },

    #[error("duplicate surface {surface:?} at line {line}")]
    DuplicateSurface { surface: String, line: usize },

    #[error("line {line}: expected special token {expected} (specials must occupy ids 0-4)")]
    NonContiguousSpecials { line: usize, expected: String },

    #[error("target size {target} cannot hold {required} special and required pieces")]
    TargetTooSmall { target: usize, required: usize },

    #[error("required character {0:?} has no candidate piece")]
    MissingRequiredChar(char),

    #[error("text of {len} characters exceeds enumeration limit of {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("lattice has no path from 0 to {len}")]
    Disconnected { len: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("id {0} is not in the vocabulary")]
    UnknownId(u32),

    #[error("sequence already carries [CLS]/[SEP]")]
    AlreadyHasSpecials,

    #[error("character {0:?} of an expanded word has no character piece")]
    MissingCharPiece(char),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: fingerprint {found} does not match {expected}")]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}
