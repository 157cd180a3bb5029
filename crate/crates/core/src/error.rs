use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A pattern or run configuration is incomplete or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A binary or text file does not follow its declared layout.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

/// Rejects NaN and infinities, naming the offending argument.
pub(crate) fn finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(domain(format!("{name} must be finite, got {value}")))
    }
}
