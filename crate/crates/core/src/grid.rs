// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial grid of sparse latents for one image.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{check_len, Result};
use crate::sae::{SaeModel, SparseLatent};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T = f32> {
    h: usize,
    w: usize,
    n_f: usize,
    cells: Vec<SparseLatent<T>>,
}

impl<T: Scalar> LatentGrid<T> {
    /// Encodes every location of an `h × w × d` activation tensor.
    pub fn encode(model: &SaeModel<T>, acts: &[T], h: usize, w: usize) -> Result<Self> {
        check_len("activation tensor", h * w * model.d(), acts.len())?;
        let cells = acts
            .chunks_exact(model.d())
            .map(|x| model.encode(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h,
            w,
            n_f: model.n_f(),
            cells,
        })
    }

    pub fn from_cells(h: usize, w: usize, n_f: usize, cells: Vec<SparseLatent<T>>) -> Result<Self> {
        check_len("grid cells", h * w, cells.len())?;
        for cell in &cells {
            if let Some(&max) = cell.indices.last() {
                if max >= n_f {
                    return Err(crate::Error::DimensionMismatch {
                        what: "latent index bound",
                        expected: n_f,
                        found: max,
                    });
                }
            }
        }
        Ok(Self { h, w, n_f, cells })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn cells(&self) -> &[SparseLatent<T>] {
        &self.cells
    }

    pub fn cell(&self, i: usize, j: usize) -> &SparseLatent<T> {
        &self.cells[i * self.w + j]
    }

    /// The `h × w` activation map of one concept.
    pub fn channel_map(&self, cid: usize) -> Vec<f64> {
        self.cells.iter().map(|c| c.get(cid).as_f64()).collect()
    }

    /// Concepts that fire anywhere in the grid, ascending.
    pub fn active_cids(&self) -> BTreeSet<usize> {
        self.cells
            .iter()
            .flat_map(|c| c.indices.iter().copied())
            .collect()
    }

    /// `‖Z[i,j]‖₂` per location.
    pub fn norms(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.l2_norm().as_f64()).collect()
    }
}
