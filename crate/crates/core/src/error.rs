use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("grid of {cells} cells cannot hold {entities} distinct entities")]
    GridTooSmall { cells: usize, entities: usize },

    #[error("episode already terminated")]
    EpisodeTerminated,

    #[error("empty reward sequence")]
    EmptyRewards,

    #[error("second-best action undefined with {0} action(s)")]
    SecondBestUndefined(usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid bounding box field `{field}`: {reason}")]
    InvalidBox { field: String, reason: String },

    #[error("invalid label {0}, expected -1 or +1")]
    InvalidLabel(i64),

    #[error("non-finite loss {value} in {context}")]
    NonFiniteLoss { context: &'static str, value: f64 },

    #[error("session error: {0}")]
    Session(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
