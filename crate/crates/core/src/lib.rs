//! Desk-scale laboratory for jointly trained retrieval-augmented generation.
//!
//! The crate wires together a late-interaction retriever, a guide retriever
//! with access to the target output, and a small log-linear generator, and
//! trains them under either a marginalized likelihood objective or an
//! evidence-lower-bound objective with reverse KL. Synthetic corpora, exact
//! search, analytic gradients, and a metric suite make every training run
//! reproducible and cheap enough to audit end to end.

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod generator;
pub mod math;
pub mod metrics;
pub mod objectives;
pub mod retrieval;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
