//! Core of the spatial-temporal knowledge distillation recommender.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds under `no_std` with `alloc`. File formats, timing, configuration
//! and the command line live in the `stkd` companion crate.
//!
//! Layout:
//! - [`numerics`]: dense tensors, a reverse-mode tape, Adam, gradient checks.
//! - [`data`]: purchase events, geohash geometry, vocabularies, leave-one-out
//!   sequences and the synthetic event generator.
//! - [`stkg`]: the spatial-temporal knowledge graph and fanout sampling.
//! - [`teacher`]: the graph encoder producing soft labels.
//! - [`student`]: the spatially enhanced causal Transformer.
//! - [`metrics`] and [`train`]: ranking metrics, batching and epoch loops.
#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]
// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
mod error;
pub mod math;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod stkg;
pub mod student;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
