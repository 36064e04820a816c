//! Error types shared across the engine.

use thiserror::Error;

/// Unified error type for all engine operations.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid chunking parameters: overlap {overlap} must be smaller than chunk size {chunk_size}")]
    ChunkParams { chunk_size: usize, overlap: usize },

    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("non-finite value in vector")]
    NonFiniteVector,

    #[error("unknown item id in candidate set: {0}")]
    UnknownItem(String),

    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    #[error("unknown memory point: {0}")]
    UnknownPoint(String),

    #[error("memory point is retired: {0}")]
    RetiredPoint(String),

    #[error("degenerate hyperedge: a memory point needs at least 2 distinct entities, got {0}")]
    DegenerateHyperedge(usize),

    #[error("cannot merge a memory point with itself: {0}")]
    SelfMerge(String),

    #[error("stale local anchor {0}: point is retired and has no live descendant")]
    StaleAnchor(String),

    #[error("embedding provider unavailable after {attempts} attempts: {reason} (batch of {batch_len} texts)")]
    RetrievalUnavailable {
        attempts: u32,
        reason: String,
        batch_len: usize,
    },

    #[error("chat provider transport failure after {attempts} attempts: {reason}")]
    ProviderTransport { attempts: u32, reason: String },

    #[error("no scripted fixture for tag \"{tag}\" at step {step}, seq {seq}")]
    FixtureMiss { tag: String, step: u32, seq: u32 },

    #[error("replay diverged from recorded memory at step {step}")]
    ReplayDivergence { step: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt or unreadable store at {path}: {reason}")]
    CorruptStore { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no documents found in corpus directory {0}")]
    EmptyCorpus(String),

    #[error("missing index at {0}; run the index command first")]
    MissingIndex(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
