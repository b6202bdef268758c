//! Toolchain for building chain-of-thought (CoT) datasets for code generation,
//! scoring generated CoTs and code, and a small numerical transformer core
//! (RMSNorm, RoPE, grouped-query attention, SwiGLU FFN, LoRA, decoding).
//!
//! The pipeline runs in four stages:
//!
//! 1. [`filters`] applies the rule-based cleaning passes (syntax, doc/code
//!    consistency, similarity against protected evaluation sets).
//! 2. [`agents`] runs the three-agent alignment (quality check, CoT
//!    generation, consistency check) over a chat-completion client.
//! 3. [`textmetrics`] and [`evalharness`] score CoTs and generated code.
//! 4. [`tinylm`] holds the model math and a LoRA training loop at toy scale.

pub mod agents;
pub mod cli;
pub mod corpus;
pub mod evalharness;
pub mod filters;
pub mod pool;
pub mod textmetrics;
pub mod tinylm;

pub use corpus::{CoTRecord, CodeSample, CorpusStats, Origin};
