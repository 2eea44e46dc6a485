//! Dialogue-completion corpus augmentation.
//!
//! Seed posts are screened ([`ingest`]), turned into completion prompts and
//! swept over a backend ([`prompt`], [`genloop`], [`backend`]), parsed and
//! filtered with heuristic rules ([`filters`]), then measured ([`analytics`],
//! [`safety`]). [`pipeline`] wires the stages together for the CLI.

pub mod analytics;
pub mod backend;
pub mod error;
pub mod exec;
pub mod filters;
pub mod genloop;
pub mod ingest;
pub mod jsonl;
pub mod mockserver;
pub mod pipeline;
pub mod prompt;
pub mod safety;
pub mod synth;
pub mod tokenize;
pub mod types;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tokenize::tokenize;
pub use types::{Dialogue, GenerationParams, SeedPost, Source, Speaker, Utterance};
