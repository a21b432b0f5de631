use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least 2 tokens for covariance pooling, got {0}")]
    InsufficientTokens(usize),

    #[error("degenerate covariance: trace {trace:e} <= epsilon {epsilon:e}")]
    DegenerateCovariance { trace: f64, epsilon: f64 },

    #[error("Newton-Schulz iteration diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("class {class} has {available} training samples, {requested} requested")]
    InsufficientData {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("{kind} at byte offset {offset}")]
    Parse { kind: ParseErrorKind, offset: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Distinct failure modes when decoding a binary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    Truncated { needed: u64, available: u64 },
    TrailingBytes(u64),
    NonFinite,
    LabelOutOfRange { label: u32, class_count: u32 },
    Malformed(String),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic(m) => write!(f, "bad magic {:02x?}", m),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated { needed, available } => {
                write!(f, "truncated: need {needed} bytes, {available} available")
            }
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} unexpected trailing bytes"),
            ParseErrorKind::NonFinite => write!(f, "non-finite value"),
            ParseErrorKind::LabelOutOfRange { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            ParseErrorKind::Malformed(msg) => write!(f, "malformed: {msg}"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
