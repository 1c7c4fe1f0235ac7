//! One error type for the whole crate. Variants are named after the failure,
//! not the module that raised it, so callers can match without knowing
//! internals.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("turn arrived out of order: expected {expected}, got {got}")]
    TurnOrder { expected: u32, got: u32 },

    #[error("unknown node \"{0}\"")]
    UnknownNode(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// A remote backend (embedder or extractor) could not be reached or kept
    /// failing after retries. Turn processing reports service-unavailable.
    #[error("transport: {0}")]
    Transport(String),

    /// The extractor responded but its output stayed unusable after the
    /// retry. Turn processing falls back to the rule extractor.
    #[error("extraction: {0}")]
    Extraction(String),

    #[error("{path}:{line}: {msg}")]
    StoreLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate store id \"{0}\"")]
    DuplicateStoreId(String),

    #[error("retrieval against an empty store")]
    EmptyStore,

    #[error("empty turn text")]
    EmptyTurnText,

    #[error("unknown conversation \"{0}\"")]
    UnknownConversation(String),

    #[error("node budget must be at least 3, got {0}")]
    BudgetTooSmall(usize),

    #[error("model file {path}: {msg}")]
    ModelFile { path: PathBuf, msg: String },

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("unsupported format version {got}, supported {supported}")]
    Version { got: u32, supported: u32 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("no trained model loaded")]
    NoModel,

    #[error("{0}")]
    InvalidInput(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
