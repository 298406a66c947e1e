//! Error type shared across the crate.
//!
//! Tensor-kernel shape violations are programmer errors and panic with
//! messages naming the offending shapes; `AvtError` covers everything that
//! legitimately flows back to a caller: file formats, configuration,
//! vocabulary mismatches, evaluation alignment, and numerical failures.

use std::fmt;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: config, arguments, vocabulary mismatch, refused overwrite.
    Validation,
    /// I/O and file-format failures.
    Runtime,
    /// NaN/Inf encountered during optimization.
    Numerical,
}

#[derive(Debug)]
pub enum AvtError {
    /// Invalid or missing configuration; message names the field.
    Config(String),
    /// Binary container violation, with the byte offset where it was detected.
    Format { offset: u64, msg: String },
    /// Underlying I/O failure with the path involved.
    Io { path: String, source: std::io::Error },
    /// Vocabulary hash or coverage mismatch.
    Vocab(String),
    /// Prediction sets do not cover the same sample ids.
    Alignment(String),
    /// Evaluation called on an empty or malformed record set.
    Eval(String),
    /// Non-finite loss during training.
    Numerical(String),
}

impl AvtError {
    pub fn class(&self) -> ErrorClass {
        match self {
            AvtError::Config(_) | AvtError::Vocab(_) | AvtError::Alignment(_) | AvtError::Eval(_) => {
                ErrorClass::Validation
            }
            AvtError::Format { .. } | AvtError::Io { .. } => ErrorClass::Runtime,
            AvtError::Numerical(_) => ErrorClass::Numerical,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AvtError::Io { path: path.into(), source }
    }
}

impl fmt::Display for AvtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AvtError::Config(msg) => write!(f, "config error: {msg}"),
            AvtError::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
            AvtError::Io { path, source } => write!(f, "io error on {path}: {source}"),
            AvtError::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            AvtError::Alignment(msg) => write!(f, "alignment error: {msg}"),
            AvtError::Eval(msg) => write!(f, "evaluation error: {msg}"),
            AvtError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for AvtError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            AvtError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvtError>;
