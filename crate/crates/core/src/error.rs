//! Error type shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("unknown tensor '{name}' in manifest {path}")]
    UnknownTensor { name: String, path: PathBuf },

    #[error("entry '{name}': file {path} is missing")]
    MissingFile { name: String, path: PathBuf },

    #[error("size mismatch for entry '{name}': expected {expected} bytes, found {actual}")]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },

    #[error("unknown dtype '{dtype}' for entry '{name}' (expected real32, int32, uint8 or bit)")]
    UnknownDtype { name: String, dtype: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("code {code} out of range [0, {max}] for {bits}-bit quantization")]
    CodeOutOfRange { code: u32, max: u32, bits: u32 },

    #[error("mask/code inconsistency: {0}")]
    MaskInconsistency(String),

    #[error("accumulator overflow in shift matmul at output row {row}: {detail}")]
    AccumulatorOverflow { row: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
