use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid weight vector: {0}")]
    Weights(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("support enumeration refused: {estimate} trajectories exceed the cap of {cap}")]
    EnumerationCap { estimate: f64, cap: usize },

    #[error("support enumeration needs finite block domains (block {block} is not enumerable)")]
    NotEnumerable { block: usize },

    #[error("sampler contract violated at block {block}: {reason}")]
    Contract { block: usize, reason: String },

    #[error("operation needs a product measure")]
    NotProduct,

    #[error("threshold oracle needs independent binary blocks: {0}")]
    NotThreshold(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}
