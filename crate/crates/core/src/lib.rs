// SPDX-License-Identifier: MIT OR Apache-2.0

//! Allocation-only core of the toolkit: a TopK sparse autoencoder with
//! hand-derived gradients, concept dictionaries built from activation maps,
//! composition prediction from conceptual maps, activation interventions, and
//! the analysis metrics that sit on top of them.
//!
//! Everything here is pure computation over slices. File formats, the edit
//! server and the CLI live in the `diffsae` crate.

#![no_std]

extern crate alloc;

pub mod adam;
pub mod analysis;
pub mod composition;
pub mod concepts;
pub mod error;
pub mod grid;
pub mod intervention;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod planted;
pub mod sae;
pub mod scalar;
pub mod tracker;

pub use adam::{adam_step, OptimizerState};
pub use error::{Error, Result};
pub use grid::LatentGrid;
pub use loss::{loss_and_grads, Gradients, LossAndGrads, LossBreakdown};
pub use mask::{Mask, Quadrant};
pub use sae::{SaeModel, SparseLatent};
pub use scalar::Scalar;
pub use tracker::DeadLatentTracker;
