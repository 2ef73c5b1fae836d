//! Retrieval-augmented passage re-ranking.
//!
//! Queries are expanded with externally retrieved snippets, either verbatim
//! or as KL-selected topical terms, turned into re-ranker input sequences,
//! rescored by a pluggable [`rerank::Scorer`] and evaluated with standard
//! ranking metrics and a paired t-test.

pub mod augment;
pub mod corpus_io;
pub mod error;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod rerank;
pub mod stats;
pub mod trainset;

pub use error::{Error, Result};
