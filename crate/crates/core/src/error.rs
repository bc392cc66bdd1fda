use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector extents that do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Parameters or configuration that violate an invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Values outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("loss error: {0}")]
    Loss(String),

    /// Malformed text or binary input. `line` is 1-based when known.
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
