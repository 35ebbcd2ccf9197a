use thiserror::Error;

pub type Result<T, E = HarpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarpError {
    /// Caller-provided data is invalid (token ids, empty corpora, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Capacity { len: usize, max: usize },

    /// A NaN or infinity appeared during computation.
    #[error("numeric failure{}: {what}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numeric { layer: Option<usize>, what: String },

    /// Shapes, ranges or preconditions violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported:?})")]
    VersionMismatch { found: u32, supported: Vec<u32> },

    #[error("alpha search failed at layer {layer}: {reason}")]
    Search { layer: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarpError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HarpError::Contract(msg.into())
    }

    pub(crate) fn corruption(msg: impl Into<String>) -> Self {
        HarpError::Corruption(msg.into())
    }
}
