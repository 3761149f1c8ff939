//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A diffeomorphism or model parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Array shapes disagree with what an operation requires.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index or patch window falls outside the image.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A configuration file is malformed or inconsistent.
    #[error("bad config: {0}")]
    Config(String),

    /// A serialized artifact has the wrong magic, version, or layout.
    #[error("bad format: {0}")]
    Format(String),

    /// A function argument is invalid for reasons other than shape.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric procedure failed (non-finite values, divergence, folding).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training diverged or produced non-finite losses.
    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn bounds(msg: impl Into<String>) -> Self {
        Error::Bounds(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
