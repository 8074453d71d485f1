use std::io;

use thiserror::Error;

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Wrong magic, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// Data ended early or decoded to something impossible.
    #[error("corrupt data in {section}: {detail}")]
    Corrupt { section: String, detail: String },

    #[error("checksum mismatch in section {section}")]
    Checksum { section: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A value does not fit the symbol range of a quantizer or coder.
    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

impl CodecError {
    pub(crate) fn corrupt(section: impl Into<String>, detail: impl Into<String>) -> Self {
        CodecError::Corrupt {
            section: section.into(),
            detail: detail.into(),
        }
    }
}
