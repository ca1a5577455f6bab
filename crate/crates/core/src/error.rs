use thiserror::Error;

/// Errors raised anywhere in the decoding toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation was called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value appeared during a forward or backward pass.
    #[error("non-finite value produced by `{op}` ({context})")]
    NonFinite { op: &'static str, context: String },

    /// Training stopped without meeting its success condition.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// An enumeration would exceed its configured size cap.
    #[error("policy space of {cardinality} joint policies exceeds the cap of {cap}")]
    Size { cardinality: u128, cap: u128 },

    /// A finite demonstration source ran dry.
    #[error("demonstration source exhausted after {served} demonstrations")]
    Exhausted { served: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
