//! Cascaded decomposition network for cross-domain few-shot classification.
//!
//! A shared learn-to-decompose (LD) module is applied sequentially to split an
//! encoded feature into a class-relevant part `r_e` (a sum of weighted
//! prototypes) and a domain-specific residual `r_d = x0 - r_e`. Training runs
//! in two stages: batch pre-training over all base classes, then episodic
//! fine-tuning on N-way K-shot tasks with a partial regularization that ties
//! the fine-tuned decomposition block to the frozen pre-trained one.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] — dense tensors, a reverse-mode gradient tape, and a
//!   finite-difference gradient checker.
//! * [`params`] — the flat parameter registry shared by model, optimizer and
//!   checkpointing.
//! * [`model`] — encoder, LD module, the sequential cascade and its ablation
//!   variants (single transformation, parallel), classifier heads, and the
//!   checkpoint container.
//! * [`objectives`] — pre-training and fine-tuning losses, prototype
//!   classification, and the partial/full regularization terms.
//! * [`data`] — synthetic multi-source-domain dataset generation, label
//!   unification, batch and episode samplers, and dataset file I/O.
//! * [`train`] — Adam, the two-stage training loops, and the ablation-variant
//!   runner.
//! * [`eval`] — episodic nearest-centroid evaluation with confidence
//!   intervals, the ablation table, and the cascade-depth sweep.
//! * [`cli`] — configuration file schema and the subcommand implementations
//!   behind the `cdnet` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Real;
