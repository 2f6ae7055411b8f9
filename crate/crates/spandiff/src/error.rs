use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum SpandiffError {
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpandiffError>;
