//! Exact cosine index over clip embeddings and the HTTP service that
//! answers text queries against it.

pub mod build;
pub mod format;
pub mod search;
pub mod service;

pub use build::{build_index, check_compatible, encode_query, model_fingerprint, BuildOptions, BuildOutcome};
pub use format::{EntryMeta, Index, IndexEntry};
pub use search::{search, Hit};
pub use service::{spawn, Engine, QueryHit, QueryRequest, QueryResponse, Running, Service};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index format error: {0}")]
    Format(String),
    #[error("build failed: {0}")]
    Build(String),
    #[error("incompatible checkpoint: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Request(String),
    #[error("{0}")]
    NotFound(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] ethoclip::Error),
}
