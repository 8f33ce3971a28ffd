use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// A forward pass produced a non-finite value. Carries the name of the
    /// first operation whose output went non-finite.
    #[error("numeric failure: non-finite value first produced by `{op}` ({detail})")]
    NonFinite { op: String, detail: String },

    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with configuration; offending tensors: {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
