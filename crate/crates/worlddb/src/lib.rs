//! An embeddable probabilistic database engine.
//!
//! The underlying relational store always holds exactly one possible world.
//! A factor graph over the world's fields encodes an unnormalized
//! distribution across all worlds, Metropolis-Hastings walks hypothesize
//! modifications to the stored world, and relational-algebra queries are
//! answered with per-tuple marginal probabilities estimated from the sampled
//! worlds. Because consecutive samples differ only in a small delta, query
//! answers are maintained incrementally instead of recomputed from scratch.
//!
//! Top-level map:
//! - [`store`]: relational store, deltas, snapshots, corpus ingestion
//! - [`factor`]: factor templates, log-space scoring, exact enumeration
//! - [`mcmc`]: Metropolis-Hastings kernel and random walks
//! - [`query`]: relational-algebra AST, parser, and bag-semantics evaluator
//! - [`incremental`]: delta-query rewrites and answer maintenance
//! - [`evaluator`]: marginal estimation (naive, incremental, parallel)
//! - [`ner`]: skip-chain sequence-labeling model, proposer, synthetic corpora
//! - [`model`]: text format for declaring models and weights

pub mod error;
pub mod evaluator;
pub mod factor;
pub mod incremental;
pub mod mcmc;
pub mod model;
pub mod ner;
pub mod query;
pub mod store;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
