//! Toolkit for adapting a general language model to medical multi-choice QA.
//!
//! The crate covers the method layer of a three-stage adaptation pipeline:
//!
//! - [`corpus`]: PubMedQA-format loading, statistics, splitting, and knowledge
//!   graph verbalization.
//! - [`glm`]: blank-filling pretraining examples (span corruption, shuffled
//!   Part B, two-dimensional positions, hybrid attention visibility).
//! - [`backend`]: model clients (HTTP chat-completion and a scripted mock),
//!   retries and bounded concurrency.
//! - [`prompting`]: Direct, CoT, CoVe and Verification-of-Choice pipelines
//!   with auditable transcripts.
//! - [`ppl`]: minimum-perplexity option selection.
//! - [`annotate`]: pseudo-labeling of unlabeled records with resumable output.
//! - [`cpoly`]: low-rank adapters, the shared/task-specific adapter mixture,
//!   Gumbel-sigmoid sampling and finite-difference gradient checks.
//! - [`eval`]: scoring, stage and leaderboard reports, training recipes.
//! - [`cli`]: the `medadapt` command-line entrypoint.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod backend;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod cpoly;
pub mod eval;
pub mod glm;
pub mod jsonl;
pub mod ppl;
pub mod prompting;

pub use backend::{Backend, BackendError, BackendRequest, Completion, MockBackend};
pub use corpus::{Dataset, McqRecord, SubsetTag};
pub use prompting::{Decision, Strategy, StrategyKind, Transcript};
