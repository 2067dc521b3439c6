//! Core of the multi-agent annotation ensemble.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without the standard library (an allocator is required):
//!
//! - [`label`]: task schemas, raw verdict parsing and the raw-to-final map.
//! - [`vote`]: per-case tallies and the highest-vote-with-winning-threshold rule.
//! - [`metrics`]: confusion matrices, accuracy/F1/recall/specificity/Jaccard
//!   and threshold curves.
//! - [`repair`]: the ordered JSON repair pipeline that turns raw model text
//!   into an [`vote::AgentVote`].
//! - [`prompt`]: prompt templates and request rendering.
//! - [`sim`]: seed-keyed simulated agents, synthetic corpora and the
//!   hallucination audit.
//!
//! File formats, HTTP backends, the regex prefilter and the CLI live in the
//! `agentvote` companion crate.
#![no_std]

extern crate alloc;

pub mod label;
pub mod metrics;
pub mod prompt;
pub mod repair;
pub mod sim;
pub mod vote;

mod rng;

pub use label::{FinalLabel, LabelId, RawCategory, SchemaError, TaskSchema};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use prompt::{ChatRequest, PromptTemplate};
pub use repair::{repair_and_extract, RepairOutcome};
pub use vote::{AgentVote, Denominator, EnsembleDecision, ParseStatus, VoteTally};
