use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error(
        "truncated file while reading {what}: needed {needed} more bytes, {available} available"
    )]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "only {kept} of {total} concepts survived denoising; at least 2 are required. \
         Enlarge or change the concept set (or adjust the temperature)"
    )]
    TooFewConcepts { kept: usize, total: usize },

    #[error("row {row} has zero norm; cosine similarity is undefined")]
    ZeroNorm { row: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}
