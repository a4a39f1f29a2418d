//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration problems
//! exit with 2, data problems with 3, numerical failures with 4.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad shapes, unknown names, bad flags).
    #[error("config: {0}")]
    Config(String),

    /// Missing or malformed input data (datasets, checkpoints, prompts).
    #[error("data: {0}")]
    Data(String),

    /// Numerical failure (singular systems, non-finite values).
    #[error("numerical: {0}")]
    Numerical(String),

    /// I/O failure while reading or writing artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Image decode/encode failure.
    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand constructor for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand constructor for [`Error::Data`].
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Shorthand constructor for [`Error::Numerical`].
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Image(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
