use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Required state is missing or inconsistent (empty buffer, absent densities, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A NaN or infinity surfaced where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A snapshot or checkpoint stream failed validation.
    #[error("corrupt snapshot: {0}")]
    Snapshot(String),

    /// Text input (config, metrics) could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
