use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants mirror the failure classes the command line maps to exit
/// codes: configuration/validation problems, broken call contracts, missing
/// artifacts and numeric blow-ups.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, wrong rank, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is unusable (non-divisible group size, lr <= 0, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A requested task, snapshot or file does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric failure at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Checkpoint or image bytes could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
