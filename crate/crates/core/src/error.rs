use std::path::PathBuf;

use thiserror::Error;

/// Why a `.st` container failed to parse.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("file too short for an 8-byte header length ({0} bytes)")]
    MissingHeaderLength(usize),
    #[error("header length {declared} exceeds file size {available}")]
    HeaderOutOfBounds { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: {reason}")]
    BadShape { name: String, reason: String },
    #[error("tensor `{name}` byte range [{start}, {end}) overlaps or leaves a gap after offset {expected}")]
    OverlappingRanges {
        name: String,
        start: u64,
        end: u64,
        expected: u64,
    },
    #[error("truncated payload: header describes {expected} bytes, file holds {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after payload: header describes {expected} bytes, file holds {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric-domain error: {0}")]
    NumericDomain(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("completeness error: {0}")]
    Completeness(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a numeric-domain failure (NaN/Inf, zero norm, zero variance).
    pub fn is_numeric_domain(&self) -> bool {
        match self {
            Error::NumericDomain(_) => true,
            Error::Sample { source, .. } => source.is_numeric_domain(),
            Error::Parse {
                source: ParseError::NonFinite(_),
                ..
            } => true,
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
