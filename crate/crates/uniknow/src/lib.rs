//! Construction and evaluation harness for knowledge-scenario QA benchmarks.
//!
//! The pipeline turns extractive-QA datasets into four knowledge scenarios
//! (Conflict, External-Only, Parametric-Only, Unknown) for any
//! completion-capable model, emits scenario-aware training sets, and scores
//! prediction files with per-scenario exact match, the Rely reliability
//! metric, and a four-way error taxonomy.

pub mod clients;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod forge;
pub mod ingest;
pub mod jsonl;
pub mod pipeline;
pub mod pk;
pub mod scenario;
pub mod templates;

pub use error::{Error, Result};
