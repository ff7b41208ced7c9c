//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error enumeration.
///
/// Variants map onto the CLI exit-code classes: configuration and
/// precondition violations, data/sample-size problems, and I/O or file
/// format failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid base: {0}")]
    InvalidBase(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid stretch: {0}")]
    InvalidStretch(String),
    #[error("invalid ramp: {0}")]
    InvalidRamp(String),
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("invalid inflation: {0}")]
    InvalidInflation(String),
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient samples: {0}")]
    SampleSize(String),
    #[error("degenerate quantile: {0}")]
    DegenerateQuantile(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
