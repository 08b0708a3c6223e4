//! Error types shared across the crate.
//!
//! Variants are grouped so the CLI can map them onto distinct exit codes:
//! configuration problems exit with 2, data/format problems with 3 and
//! everything else (I/O, contract violations) with 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid configuration (hyperparameters, mask specs, CLI flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data (labels out of range, malformed records).
    #[error("data error: {0}")]
    Data(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input signal shorter than the encoder's receptive field.
    #[error("input too short: need at least {required} samples, got {got}")]
    InputTooShort { required: usize, got: usize },

    /// A mask plan with too few masked positions for the requested loss.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// Malformed cell in a CSV dataset.
    #[error("parse error in {path} at row {row}, column {col}: {msg}")]
    CsvParse {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    /// File does not start with the expected magic bytes.
    #[error("bad magic at offset {offset} in {path}: expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        offset: u64,
        expected: &'static str,
    },

    /// File format version not supported by this build.
    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    /// File ended before the declared payload was complete.
    #[error("truncated file {path}: {context}")]
    Truncated { path: PathBuf, context: String },

    #[error("i/o error on {path}: {source}")]
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

    /// Process exit code class for the CLI. Documented in the README.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DegenerateMask(_) => 2,
            Error::Data(_)
            | Error::CsvParse { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
