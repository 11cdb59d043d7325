//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum.
///
/// Variants are grouped by how the caller should react: `InvalidArgument`
/// and `Domain` indicate programmer or data errors on a single call,
/// `Config` collects everything wrong with an experiment description,
/// `DegenerateState` flags unrecoverable aggregation states, and
/// `Format`/`Io` cover on-disk data.
#[derive(Debug, Error)]
pub enum Error {
    /// Arguments are structurally wrong (length mismatch, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The experiment configuration is rejected. The message lists every
    /// violation found, one per line, so a user can fix the file in one pass.
    #[error("configuration error: {0}")]
    Config(String),

    /// An aggregation state from which no meaningful update can be computed.
    #[error("degenerate state: {0}")]
    DegenerateState(String),

    /// A binary file does not follow the expected format. `offset` is the
    /// byte position at which parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
