// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composition prediction: turn a latent grid into a per-location word
//! embedding (the conceptual map), then threshold its cosine similarity to a
//! target word to get a segmentation mask.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::concepts::{normalize_label, AnnotatedObject, EmbeddingTable};
use crate::error::{check_len, Error, Result};
use crate::grid::LatentGrid;
use crate::mask::{iou, Mask};
use crate::scalar::{cosine, Scalar};

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptualMap {
    h: usize,
    w: usize,
    dim: usize,
    cells: Vec<Option<Vec<f64>>>,
    contributors: Vec<Vec<usize>>,
}

impl ConceptualMap {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.cells[i * self.w + j].as_deref()
    }

    /// Concepts that contributed to the embedding at `(i, j)`.
    pub fn contributors(&self, i: usize, j: usize) -> &[usize] {
        &self.contributors[i * self.w + j]
    }
}

/// Activation-weighted mean of the centroids of every active, embeddable
/// concept at each location.
pub fn conceptual_map<T: Scalar>(
    grid: &LatentGrid<T>,
    centroids: &BTreeMap<usize, Vec<f64>>,
    dim: usize,
) -> Result<ConceptualMap> {
    for v in centroids.values() {
        check_len("centroid dimension", dim, v.len())?;
    }
    let mut cells = Vec::with_capacity(grid.cells().len());
    let mut contributors = Vec::with_capacity(grid.cells().len());
    for cell in grid.cells() {
        let mut acc = vec![0.0; dim];
        let mut weight = 0.0;
        let mut who = Vec::new();
        for (cid, z) in cell.iter() {
            let z = z.as_f64();
            if z <= 0.0 {
                continue;
            }
            if let Some(c) = centroids.get(&cid) {
                for (a, x) in acc.iter_mut().zip(c) {
                    *a += z * x;
                }
                weight += z;
                who.push(cid);
            }
        }
        if weight > 0.0 {
            acc.iter_mut().for_each(|a| *a /= weight);
            cells.push(Some(acc));
        } else {
            cells.push(None);
        }
        contributors.push(who);
    }
    Ok(ConceptualMap {
        h: grid.h(),
        w: grid.w(),
        dim,
        cells,
        contributors,
    })
}

/// Mean embedding of the target's tokens; an error if none is in vocabulary.
pub fn target_embedding(table: &EmbeddingTable, target: &str) -> Result<Vec<f64>> {
    table
        .phrase_embedding(target)
        .ok_or_else(|| Error::NotFound(alloc::format!("no in-vocabulary token in {target:?}")))
}

/// Cells whose cosine similarity to `target` is at least `threshold`.
pub fn predict_mask(cmap: &ConceptualMap, target: &[f64], threshold: f64) -> Result<Mask> {
    check_len("target embedding dimension", cmap.dim, target.len())?;
    let bits = cmap
        .cells
        .iter()
        .map(|c| c.as_ref().is_some_and(|e| cosine(e, target) >= threshold))
        .collect();
    Mask::from_bits(cmap.h, cmap.w, bits)
}

pub fn predict_mask_for(cmap: &ConceptualMap, target: &str, table: &EmbeddingTable, threshold: f64) -> Result<Mask> {
    predict_mask(cmap, &target_embedding(table, target)?, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub image_id: u64,
    pub noun: String,
    pub predicted: Mask,
    pub truth: Mask,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositionReport {
    pub pairs: Vec<PairResult>,
    pub mean_iou: f64,
    pub sim_threshold: f64,
    /// Nouns with no in-vocabulary token.
    pub skipped_no_embedding: u64,
    /// Nouns with no matching annotation in the image.
    pub skipped_not_detected: u64,
}

impl CompositionReport {
    pub fn new(sim_threshold: f64) -> Self {
        Self {
            sim_threshold,
            ..Self::default()
        }
    }

    /// Scores every noun of one image against its annotations. Nouns with no
    /// embedding or no matching annotation are counted and skipped.
    pub fn add_image(
        &mut self,
        image_id: u64,
        cmap: &ConceptualMap,
        table: &EmbeddingTable,
        nouns: &[String],
        objects: &[AnnotatedObject],
    ) -> Result<()> {
        let mut sorted: Vec<String> = nouns.iter().map(|n| normalize_label(n)).collect();
        sorted.sort();
        sorted.dedup();
        for noun in sorted {
            let Some(target) = table.phrase_embedding(&noun) else {
                self.skipped_no_embedding += 1;
                continue;
            };
            let mut truth: Option<Mask> = None;
            for o in objects.iter().filter(|o| normalize_label(&o.label) == noun) {
                truth = Some(match truth {
                    None => o.mask.clone(),
                    Some(t) if t.same_shape(&o.mask) => t.union(&o.mask)?,
                    Some(t) => {
                        // Mixed resolutions: merge at the grid.
                        let a = t.downsample_majority(cmap.h, cmap.w)?;
                        let b = o.mask.downsample_majority(cmap.h, cmap.w)?;
                        a.union(&b)?
                    }
                });
            }
            let Some(truth) = truth else {
                self.skipped_not_detected += 1;
                continue;
            };
            let truth = if truth.h() == cmap.h && truth.w() == cmap.w {
                truth
            } else {
                truth.downsample_majority(cmap.h, cmap.w)?
            };
            let predicted = predict_mask(cmap, &target, self.sim_threshold)?;
            let score = iou(&predicted, &truth)?;
            self.pairs.push(PairResult {
                image_id,
                noun,
                predicted,
                truth,
                iou: score,
            });
        }
        Ok(())
    }

    /// Orders pairs by image then noun and recomputes the mean IoU.
    pub fn finalize(&mut self) {
        self.pairs
            .sort_by(|a, b| a.image_id.cmp(&b.image_id).then_with(|| a.noun.cmp(&b.noun)));
        self.mean_iou = if self.pairs.is_empty() {
            0.0
        } else {
            self.pairs.iter().map(|p| p.iou).sum::<f64>() / self.pairs.len() as f64
        };
    }
}
