use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter `{0}` belongs to a frozen network")]
    Frozen(String),
    #[error("optimizer cannot be attached to a frozen network")]
    FrozenOptimizer,
    #[error("parameter archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
