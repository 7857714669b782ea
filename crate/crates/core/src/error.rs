use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    Vocabulary { token: u32, vocab_size: usize },

    #[error("sequence of length {requested} exceeds capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("enumeration budget exceeded: {bound} trajectories > limit {limit}")]
    Budget { bound: u128, limit: u128 },

    #[error("non-finite loss {loss} at {context}")]
    NonFinite { loss: f64, context: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Short machine-readable tag, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Capacity { .. } => "capacity",
            Error::Parameter(_) => "parameter",
            Error::Budget { .. } => "budget",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
