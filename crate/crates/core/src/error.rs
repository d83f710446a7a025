use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Precondition,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("archive error at byte offset {offset}: {msg}")]
    Archive { offset: u64, msg: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("bit position {0} out of range 0..=31")]
    BitPosition(u32),

    #[error("coordinate {tensor}[{index}] out of bounds")]
    Coordinate { tensor: String, index: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },

    #[error("sidecar error: {0}")]
    Sidecar(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Precondition(_) | Error::BitPosition(_) | Error::Coordinate { .. } => {
                ErrorClass::Precondition
            }
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
