/// Crate-wide error type. Variants mirror the failure classes that callers
/// can meaningfully react to: bad shapes, bad configuration, malformed
/// files, degenerate math inputs, and diverged training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch; the message names the offending
    /// operation and the shapes involved.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or truncated on-disk artifact (checkpoint, image, manifest).
    #[error("format error: {0}")]
    Format(String),

    /// Numerically degenerate input (near-parallel 6D rotation vectors,
    /// non-finite losses, empty reductions).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Procedural generation exhausted its rejection-sampling budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training diverged (non-finite loss) or was otherwise unable to proceed.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
