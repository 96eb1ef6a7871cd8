//! Domain-incremental learning with consolidated low-rank adapters.
//!
//! A self-contained engine for learning a sequence of domains that share one
//! label space: task-shared LoRA adapters on the early blocks of a frozen
//! transformer backbone extract cross-domain knowledge, per-domain adapters
//! on the late blocks isolate domain-specific knowledge, and a stochastic
//! cosine classifier (means replaced by prototypes for inference) makes the
//! class decision. Because no domain IDs are available at test time, an
//! auxiliary stack of per-layer domain classifiers — trained against
//! GMM-replayed embeddings of past domains with a ball-generator loss —
//! routes each sample to its adapter set, exiting early at the first layer
//! whose confidence clears a threshold.
//!
//! The crate also ships a synthetic domain-shift benchmark generator and a
//! small CLI for running experiments end to end. Start from the `examples/`
//! directory: each major capability has one runnable example.
//!
//! Module map:
//! - [`numkit`]: dense f64 linear algebra, seeded RNG, finite-difference oracle
//! - [`backbone`]: frozen micro-transformer with per-layer traces
//! - [`adapters`]: LoRA construction, routing, snapshots, gradient redistribution
//! - [`heads`]: stochastic / cosine / linear classifier heads and prototypes
//! - [`mixtures`]: per-layer per-domain Gaussian mixtures (EM, sampling)
//! - [`losses`]: cross-entropy, distillation, ball-generator, joint losses
//! - [`domainid`]: transformation MLPs, local domain classifiers, early exit
//! - [`stream`]: synthetic domain-incremental benchmark generator
//! - [`engine`]: the per-domain training/inference orchestrator
//! - [`cli`]: experiment runner behind the `conec` binary

pub mod adapters;
pub mod backbone;
pub mod cli;
pub(crate) mod codec;
pub mod domainid;
pub mod engine;
pub mod error;
pub mod heads;
pub mod losses;
pub mod mixtures;
pub mod numkit;
pub mod stream;

pub use error::{Error, Result};
