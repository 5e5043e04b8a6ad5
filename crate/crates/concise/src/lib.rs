//! Confidence-guided construction of compressed reasoning chains.
//!
//! The library drives a text-completion backend step by step to build
//! reasoning chains in which redundant self-reflection is suppressed
//! (a confidence phrase is injected where a reflection step would start,
//! and the step is regenerated) and generation halts early once a
//! lightweight confidence probe clears a threshold. Verified chains are
//! turned into supervised fine-tuning targets and preference pairs; the
//! [`metrics`] module computes accuracy, token, reflection, and
//! compression statistics over the results.
//!
//! The pieces compose around two traits of the design:
//!
//! * everything is deterministic for a fixed `(task, config, script, seed)`
//!   tuple, so scripted runs can be frozen as golden files;
//! * the backend is abstract ([`backend::Backend`]) with a scripted mock
//!   for tests and an HTTP completions client (feature `http`) for real
//!   engines.

pub mod answer;
pub mod backend;
pub mod chain;
pub mod confidence;
pub mod dataset;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod reflect;
pub mod testkit;

pub use answer::{extract_answer, verify_answer};
pub use backend::{Backend, CompletionRequest, CompletionResult, FinishReason, TokenDistribution};
pub use chain::{PromptTemplate, ReasoningChain, Step, StepKind, Task, Termination};
pub use confidence::{ConfidenceReading, DetectorConfig, PhrasePool};
pub use pipeline::{BuildOutcome, BuildStatus, PipelineConfig};
pub use reflect::{JudgeAnnotation, KeywordSet};
