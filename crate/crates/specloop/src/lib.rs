//! A desk-scale, fully deterministic simulation of a speculative-decoding
//! serving stack whose drafter is trained online from serving traces.
//!
//! The crate wires together:
//!
//! * [`model`] — a seeded order-2 Markov *target* model plus a linear-softmax
//!   *drafter* (the speculator whose proposals get verified);
//! * [`engine`] — token-tree proposal, tree attention masks, greedy
//!   verification, and lossless speculative decoding;
//! * [`analytics`] — closed-form expected-accept-length / speedup /
//!   throughput / memory formulas;
//! * [`loss`] + [`optim`] + [`learner`] — KL-based distillation losses with
//!   hand-derived gradients, an AdamW optimizer, and the batched tree
//!   training step that consumes serving traces;
//! * [`trace`] — the verification-step trace record, optional top-K payload
//!   compression, and a bounded FIFO trace buffer;
//! * [`traffic`] — synthetic multi-domain request streams;
//! * [`sim`] + [`orchestrator`] — a simulated-clock cost model and the
//!   serving/training loop with versioned drafter hot-swaps, in both a
//!   deterministic discrete-event mode and a real threaded mode;
//! * [`config`] + [`output`] — TOML experiment configs with dotted-path
//!   overrides, and deterministic JSONL/CSV writers.
//!
//! Everything is seeded and reproducible: the same config and seed produce
//! byte-identical output files in deterministic mode.

pub mod analytics;
pub mod config;
pub mod engine;
pub mod error;
pub mod learner;
pub mod loss;
pub mod model;
pub mod optim;
pub mod orchestrator;
pub mod output;
pub mod sim;
pub mod trace;
pub mod traffic;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
