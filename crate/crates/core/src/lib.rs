//! Evidence-grounded malware verdicts.
//!
//! Functions lifted from a binary are filtered down to the complex ones,
//! embedded from their assembly and pseudo-C, matched against a knowledge
//! base of analyst-labelled functions, and judged by an ensemble of sampled
//! agents. Each function gets a tri-state verdict with an evidence strength
//! (FES, vote fraction scaled by neighbor similarity) and a conflict score
//! (ECS, entropy of the votes). High conflict routes the input to a human.

pub mod corpus;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod http;
pub mod kb;
pub mod label;
pub mod pipeline;
pub mod simulate;
pub mod synthetic;
pub mod verdict;

pub use corpus::{FunctionRecord, RecordKey};
pub use error::{Error, ErrorClass, Result};
pub use label::{Label, Verdict, Vote};
pub use pipeline::{Mode, Pipeline, PipelineParams};
pub use verdict::{DecisionThresholds, VerdictTuple};
