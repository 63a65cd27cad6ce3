use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the exit-code classes of the command-line front
/// end: domain and data problems are caller-fixable, numeric failures come
/// from training or encoding blowing up.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (zero vector, bad theta, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Bytes did not follow the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),
    /// The payload ended before a complete record could be read.
    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: String },
    /// Well-formed bytes carrying content that breaks a data invariant.
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf appeared in a loss, gradient, or encoder output.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
