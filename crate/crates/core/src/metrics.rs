// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction quality metrics.
//!
//! `scaled_mse = Σ‖x − x̂‖² / Σ‖x − x̄‖²`, where `x̄` is the mean vector of the
//! evaluation set, so the mean predictor scores exactly 1. Explained variance
//! is `100 · (1 − Var(x − x̂) / Var(x))` per channel, averaged over channels
//! with nonzero variance.
//!
//! Both need the set means first, so evaluation is two passes over the data:
//! [`MeanPass`] then [`SpreadPass`], fed the same vectors in the same order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub scaled_mse: f64,
    pub explained_variance_pct: f64,
    pub n_vectors: u64,
    pub dead_fraction: f64,
}

/// Mean of `rows × d` vectors, accumulated in `f64` in row order.
pub fn mean_vector(vectors: &[f32], d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for row in vectors.chunks_exact(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
        n += 1;
    }
    acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect()
}

#[derive(Debug, Clone)]
pub struct MeanPass {
    d: usize,
    sum_x: Vec<f64>,
    sum_r: Vec<f64>,
    n: u64,
}

impl MeanPass {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            sum_x: vec![0.0; d],
            sum_r: vec![0.0; d],
            n: 0,
        }
    }

    pub fn push(&mut self, x: &[f32], x_hat: &[f32]) -> Result<()> {
        check_len("input vector", self.d, x.len())?;
        check_len("reconstruction", self.d, x_hat.len())?;
        for c in 0..self.d {
            self.sum_x[c] += f64::from(x[c]);
            self.sum_r[c] += f64::from(x[c] - x_hat[c]);
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SpreadPass> {
        if self.n == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        let n = self.n as f64;
        Ok(SpreadPass {
            d: self.d,
            mean_x: self.sum_x.iter().map(|s| (s / n) as f32).collect(),
            mean_r: self.sum_r.iter().map(|s| s / n).collect(),
            resid_sq: 0.0,
            spread_sq: 0.0,
            var_x: vec![0.0; self.d],
            var_r: vec![0.0; self.d],
            expected: self.n,
            n: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpreadPass {
    d: usize,
    mean_x: Vec<f32>,
    mean_r: Vec<f64>,
    resid_sq: f64,
    spread_sq: f64,
    var_x: Vec<f64>,
    var_r: Vec<f64>,
    expected: u64,
    n: u64,
}

impl SpreadPass {
    pub fn mean_x(&self) -> &[f32] {
        &self.mean_x
    }

    pub fn push(&mut self, x: &[f32], x_hat: &[f32]) -> Result<()> {
        check_len("input vector", self.d, x.len())?;
        check_len("reconstruction", self.d, x_hat.len())?;
        for c in 0..self.d {
            let r = x[c] - x_hat[c];
            let dx = x[c] - self.mean_x[c];
            self.resid_sq += f64::from(r) * f64::from(r);
            self.spread_sq += f64::from(dx) * f64::from(dx);
            self.var_x[c] += f64::from(dx) * f64::from(dx);
            let dr = f64::from(r) - self.mean_r[c];
            self.var_r[c] += dr * dr;
        }
        self.n += 1;
        Ok(())
    }

    pub fn finish(self, dead_fraction: f64) -> Result<EvalReport> {
        if self.n != self.expected {
            return Err(Error::DimensionMismatch {
                what: "second-pass vector count",
                expected: self.expected as usize,
                found: self.n as usize,
            });
        }
        let scaled_mse = if self.resid_sq == 0.0 {
            0.0
        } else if self.spread_sq == 0.0 {
            return Err(Error::InvalidArgument(
                "evaluation set has zero variance; scaled MSE undefined".into(),
            ));
        } else {
            self.resid_sq / self.spread_sq
        };
        let ratios: Vec<f64> = self
            .var_x
            .iter()
            .zip(&self.var_r)
            .filter(|(vx, _)| **vx > 0.0)
            .map(|(vx, vr)| vr / vx)
            .collect();
        let explained_variance_pct = if ratios.is_empty() {
            if self.resid_sq == 0.0 {
                100.0
            } else {
                0.0
            }
        } else {
            100.0 * (1.0 - ratios.iter().sum::<f64>() / ratios.len() as f64)
        };
        Ok(EvalReport {
            scaled_mse,
            explained_variance_pct,
            n_vectors: self.n,
            dead_fraction,
        })
    }
}

/// Both passes over in-memory `rows × d` inputs and reconstructions.
pub fn evaluate_reconstructions(
    inputs: &[f32],
    reconstructions: &[f32],
    d: usize,
    dead_fraction: f64,
) -> Result<EvalReport> {
    check_len("reconstruction buffer", inputs.len(), reconstructions.len())?;
    let mut first = MeanPass::new(d);
    for (x, xh) in inputs.chunks_exact(d).zip(reconstructions.chunks_exact(d)) {
        first.push(x, xh)?;
    }
    let mut second = first.finish()?;
    for (x, xh) in inputs.chunks_exact(d).zip(reconstructions.chunks_exact(d)) {
        second.push(x, xh)?;
    }
    second.finish(dead_fraction)
}
