//! Relation-guided prompt learning for cross-domain sequential
//! recommendation without shared users.
//!
//! The pipeline: load per-domain interactions and knowledge graphs, embed the
//! graphs with TransE, pool relation embeddings into shared and
//! domain-specific prompt banks, pretrain a prompt-enriched causal
//! transformer on every domain, then fine-tune on a target domain.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod io;
pub mod kge;
pub mod promptbank;
pub mod rng;
pub mod seqmodel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
