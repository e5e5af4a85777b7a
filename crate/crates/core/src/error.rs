use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label {label} at position {index} is not 0 or 1")]
    Label { index: usize, label: usize },

    #[error("{}", format_parse_errors(.0))]
    Parse(Vec<ParseIssue>),

    #[error("no '{question}' ratings for image '{image_id}'")]
    Aggregation { image_id: String, question: String },

    #[error("degenerate ratings: low threshold {low} >= high threshold {high}")]
    Degenerate { low: f64, high: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    ModelFormat(#[from] ModelFormatError),
}

/// One malformed row of an input CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    pub line: u64,
    pub message: String,
}

fn format_parse_errors(issues: &[ParseIssue]) -> String {
    let mut out = format!("{} malformed row(s)", issues.len());
    for issue in issues {
        out.push_str(&format!("\n  line {}: {}", issue.line, issue.message));
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelFormatError {
    #[error("bad magic bytes {0:?}, expected \"PCNN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated model file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{actual} trailing bytes after the weight blobs")]
    TrailingBytes { actual: usize },
    #[error("layer table does not describe the supported architecture: {0}")]
    Architecture(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
