use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown model config {0:?}")]
    UnknownConfig(String),
    #[error("game {index} requested before game {cursor} was answered")]
    OutOfOrder { index: usize, cursor: usize },
    #[error("game {index} already has a different answer")]
    AlreadyAnswered { index: usize },
    #[error("photo {0:?} is not part of this game")]
    ForeignPhoto(String),
    #[error("session incomplete: {answered} of {total} games answered")]
    Incomplete { answered: usize, total: usize },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("store is corrupt: {0}")]
    Corrupt(String),
    #[error("simulated crash after persisting the answer")]
    SimulatedCrash,
    #[error(transparent)]
    Core(#[from] sketchcomm::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
