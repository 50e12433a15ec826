use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("agent {agent} chose unavailable action {action}")]
    UnavailableAction { agent: usize, action: usize },

    #[error("step called on a terminated episode")]
    EpisodeTerminated,

    #[error("no available action for agent")]
    NoAvailableAction,

    #[error("cannot cluster {points} points into {k} clusters")]
    ClusterCount { k: usize, points: usize },

    #[error("non-finite contrastive score between query {query} and key {key}")]
    NonFiniteScore { query: usize, key: usize },

    #[error("non-finite attention logit for head {head}, agent {agent}")]
    NonFiniteLogit { head: usize, agent: usize },

    #[error("non-finite {what} loss at update {update}")]
    NonFiniteLoss { what: &'static str, update: u64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Errors caused by user-supplied configuration or arguments rather
    /// than by a failure during a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidArgument(_))
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
