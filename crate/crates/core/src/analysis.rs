// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-hoc metrics: concept intensity rankings, context-free concept
//! screening, quadrant center-of-mass scoring and edit-success tables.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::grid::LatentGrid;
use crate::mask::Quadrant;
use crate::scalar::Scalar;

/// Success rate of placing an object in a uniformly random quadrant.
pub const RANDOM_QUADRANT_BASELINE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConceptIntensity {
    pub cid: usize,
    pub image_id: u64,
    pub gamma: f64,
}

/// Spatial mean of one concept's latent over an image.
pub fn concept_intensity<T: Scalar>(grid: &LatentGrid<T>, cid: usize) -> f64 {
    let cells = grid.cells();
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().map(|c| c.get(cid).as_f64()).sum::<f64>() / cells.len() as f64
}

/// Highest intensity first, ties to the lower image id.
pub fn rank_top_examples(mut items: Vec<ConceptIntensity>, top_n: usize) -> Vec<ConceptIntensity> {
    items.sort_by(|a, b| {
        b.gamma
            .partial_cmp(&a.gamma)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
    });
    items.truncate(top_n);
    items
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContextFreeConcept {
    pub cid: usize,
    /// Cross-image variance averaged over locations.
    pub score: f64,
    pub mean_map: Vec<f64>,
    pub variance_map: Vec<f64>,
}

/// Per-concept, per-location first and second moments across images.
#[derive(Debug, Clone)]
pub struct SpatialVariance {
    n_f: usize,
    h: usize,
    w: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n_images: u64,
}

impl SpatialVariance {
    pub fn new(n_f: usize, h: usize, w: usize) -> Self {
        Self {
            n_f,
            h,
            w,
            sum: vec![0.0; n_f * h * w],
            sum_sq: vec![0.0; n_f * h * w],
            n_images: 0,
        }
    }

    pub fn n_images(&self) -> u64 {
        self.n_images
    }

    pub fn add<T: Scalar>(&mut self, grid: &LatentGrid<T>) -> Result<()> {
        check_len("grid height", self.h, grid.h())?;
        check_len("grid width", self.w, grid.w())?;
        check_len("grid latents", self.n_f, grid.n_f())?;
        let hw = self.h * self.w;
        for (p, cell) in grid.cells().iter().enumerate() {
            for (cid, v) in cell.iter() {
                let v = v.as_f64();
                self.sum[cid * hw + p] += v;
                self.sum_sq[cid * hw + p] += v * v;
            }
        }
        self.n_images += 1;
        Ok(())
    }

    /// The `bottom_n` lowest-variance concepts among those that fire at all,
    /// ties to the lower id.
    pub fn context_free(&self, bottom_n: usize) -> Result<Vec<ContextFreeConcept>> {
        if self.n_images < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "context-free screening needs at least 2 images, got {}",
                self.n_images
            )));
        }
        let hw = self.h * self.w;
        let n = self.n_images as f64;
        let mut out = Vec::new();
        for cid in 0..self.n_f {
            let sums = &self.sum[cid * hw..(cid + 1) * hw];
            if sums.iter().all(|&s| s == 0.0) {
                continue;
            }
            let mean_map: Vec<f64> = sums.iter().map(|s| s / n).collect();
            let variance_map: Vec<f64> = self.sum_sq[cid * hw..(cid + 1) * hw]
                .iter()
                .zip(&mean_map)
                .map(|(sq, m)| (sq / n - m * m).max(0.0))
                .collect();
            let score = variance_map.iter().sum::<f64>() / hw as f64;
            out.push(ContextFreeConcept {
                cid,
                score,
                mean_map,
                variance_map,
            });
        }
        out.sort_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cid.cmp(&b.cid))
        });
        out.truncate(bottom_n);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuadrantOutcome {
    pub success: bool,
    /// Score-weighted mean `(row, col)` in pixel-index coordinates.
    pub center: (f64, f64),
    pub classified: Quadrant,
}

/// Classifies the center of mass of a score map into a quadrant.
///
/// A center strictly before the middle pixel index `(h − 1)/2` is top (resp.
/// `(w − 1)/2` and left); a center exactly on the middle goes bottom/right.
pub fn quadrant_success(scores: &[f64], h: usize, w: usize, intended: Quadrant) -> Result<QuadrantOutcome> {
    check_len("score map", h * w, scores.len())?;
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidArgument("score map must be finite and nonnegative".into()));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("score map has no mass".into()));
    }
    let (mut row, mut col) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let s = scores[i * w + j];
            row += i as f64 * s;
            col += j as f64 * s;
        }
    }
    let center = (row / total, col / total);
    let mid_row = (h as f64 - 1.0) / 2.0;
    let mid_col = (w as f64 - 1.0) / 2.0;
    let classified = Quadrant::from_halves(center.0 < mid_row, center.1 < mid_col);
    Ok(QuadrantOutcome {
        success: classified == intended,
        center,
        classified,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditRecord {
    pub id: String,
    pub clip_before: f64,
    pub clip_after: f64,
    pub lpips: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditSuccessSummary {
    pub n: usize,
    pub mean_before: f64,
    pub mean_after: f64,
    pub delta: f64,
    /// Fraction of records whose score strictly increased.
    pub success_rate: f64,
    pub mean_lpips: f64,
}

pub fn edit_success_table(records: &[EditRecord]) -> Result<EditSuccessSummary> {
    if records.is_empty() {
        return Err(Error::Empty("edit records"));
    }
    let n = records.len() as f64;
    let mean_before = records.iter().map(|r| r.clip_before).sum::<f64>() / n;
    let mean_after = records.iter().map(|r| r.clip_after).sum::<f64>() / n;
    let wins = records.iter().filter(|r| r.clip_after > r.clip_before).count();
    Ok(EditSuccessSummary {
        n: records.len(),
        mean_before,
        mean_after,
        delta: mean_after - mean_before,
        success_rate: wins as f64 / n,
        mean_lpips: records.iter().map(|r| r.lpips).sum::<f64>() / n,
    })
}
