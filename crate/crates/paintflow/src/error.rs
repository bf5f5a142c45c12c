use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. `class()` gives the stable machine-parsable
/// identifier used by the CLI's single-line error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported character {ch:?} at index {index}")]
    UnsupportedChar { ch: char, index: usize },

    #[error("zero capacity: {0}")]
    ZeroCapacity(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("codec mismatch: latent was produced by {found}, expected {expected}")]
    CodecMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
}

impl Error {
    /// Stable kebab-case class for machine-readable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::UnsupportedChar { .. } => "unsupported-char",
            Error::ZeroCapacity(_) => "zero-capacity",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::CodecMismatch { .. } => "codec-mismatch",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non-finite",
            Error::MissingFile(_) => "missing-file",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::ChecksumMismatch(_) => "checksum-mismatch",
            Error::CorruptData(_) => "corrupt-data",
            Error::EmptyCorpus => "empty-corpus",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
        }
    }

    /// Wrap an io error with its path, mapping NotFound to MissingFile.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
