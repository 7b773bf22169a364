use thiserror::Error;

pub type Result<T, E = CrcdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrcdError {
    /// Model or run configuration is inconsistent (dimensions, missing head, bad values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Config file parsed but a field violates the schema.
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    /// Caller violated an operation's contract (wrong argument order, shape mismatch).
    #[error("usage error: {0}")]
    Usage(String),

    /// A representation row has zero norm and cannot be normalized.
    #[error("degenerate input: {what} (row {row})")]
    DegenerateInput { what: String, row: usize },

    /// A projected relation has zero norm inside the critic.
    #[error("degenerate relation for pair ({anchor}, {other})")]
    DegenerateRelation { anchor: usize, other: usize },

    /// Non-finite value met during a computation.
    #[error("numerical error in {component}{}", .sample_id.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    Numerical {
        component: String,
        sample_id: Option<usize>,
    },

    /// Not enough eligible queue entries to draw negatives yet.
    #[error("replay queue warming up: {eligible} eligible entries, {needed} needed")]
    WarmUp { eligible: usize, needed: usize },

    /// Dataset or checkpoint could not be read or failed verification.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CrcdError {
    /// Stable numeric code per variant; shared by the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Schema { .. } => 2,
            Self::Usage(_) => 3,
            Self::DegenerateInput { .. } => 4,
            Self::DegenerateRelation { .. } => 5,
            Self::Numerical { .. } => 6,
            Self::WarmUp { .. } => 7,
            Self::Ingestion(_) => 8,
            Self::Io(_) => 9,
            Self::Json(_) => 10,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn numerical(component: impl Into<String>) -> Self {
        Self::Numerical {
            component: component.into(),
            sample_id: None,
        }
    }
}
