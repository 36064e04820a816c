//! Query engine over long documents: an offline-built knowledge graph is
//! queried in steps, with retrieved evidence consolidated into a
//! hypergraph working memory whose points update, grow, and merge into
//! higher-order propositions that steer later retrieval and the final
//! answer.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod graph;
pub mod llm;
pub mod memory;
pub mod orchestrator;
pub mod parse;
pub mod prompts;
pub mod retrieval;
pub mod store;
pub mod trace;

pub use error::{EngineError, Result};
