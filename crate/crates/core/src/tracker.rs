// SPDX-License-Identifier: MIT OR Apache-2.0

//! Staleness bookkeeping for dead latents.
//!
//! A latent is dead once it has gone `dead_threshold_steps` consecutive
//! training steps without firing on any sample.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_DEAD_THRESHOLD_STEPS: u64 = 800;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLatentTracker {
    last_fired: Vec<u64>,
    dead_threshold_steps: u64,
    step: u64,
}

impl DeadLatentTracker {
    pub fn new(n_f: usize, dead_threshold_steps: u64) -> Self {
        Self {
            last_fired: vec![0; n_f],
            dead_threshold_steps,
            step: 0,
        }
    }

    pub fn n_f(&self) -> usize {
        self.last_fired.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dead_threshold_steps(&self) -> u64 {
        self.dead_threshold_steps
    }

    pub fn last_fired(&self) -> &[u64] {
        &self.last_fired
    }

    /// Records that every latent in `active_sets` fired at `step`.
    pub fn update<S: AsRef<[usize]>>(&mut self, active_sets: &[S], step: u64) -> Result<()> {
        if step < self.step {
            return Err(Error::InvalidArgument(alloc::format!(
                "tracker step went backwards: {} -> {step}",
                self.step
            )));
        }
        let n_f = self.last_fired.len();
        for set in active_sets {
            for &i in set.as_ref() {
                if i >= n_f {
                    return Err(Error::DimensionMismatch {
                        what: "latent index bound",
                        expected: n_f,
                        found: i,
                    });
                }
            }
        }
        self.step = step;
        for set in active_sets {
            for &i in set.as_ref() {
                self.last_fired[i] = step;
            }
        }
        Ok(())
    }

    pub fn staleness(&self, latent: usize) -> u64 {
        self.step - self.last_fired[latent]
    }

    pub fn is_dead(&self, latent: usize) -> bool {
        self.staleness(latent) >= self.dead_threshold_steps
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        (0..self.n_f()).map(|i| self.is_dead(i)).collect()
    }

    pub fn dead_count(&self) -> usize {
        (0..self.n_f()).filter(|&i| self.is_dead(i)).count()
    }

    pub fn dead_fraction(&self) -> f64 {
        if self.last_fired.is_empty() {
            return 0.0;
        }
        self.dead_count() as f64 / self.last_fired.len() as f64
    }
}
