// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept dictionaries: which annotated objects each concept fires on, the
//! word embeddings that summarize a concept, and the metrics defined over
//! those embeddings.
//!
//! A label is attached to a concept in an image when the concept's activation
//! map, min-max normalized and thresholded, overlaps the object's mask with
//! IoU above the IoU threshold. Repeated hits increment the label's count.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::grid::LatentGrid;
use crate::mask::{binarize_map, iou, Mask};
use crate::scalar::{cosine, Scalar};

pub const DEFAULT_ACT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Token → vector lookup. Keys are stored lowercased.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        check_len("embedding dimension", self.dim, vector.len())?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        self.entries.insert(token.to_lowercase(), vector);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(&token.to_lowercase()).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Mean embedding of the in-vocabulary whitespace tokens of `text`.
    pub fn phrase_embedding(&self, text: &str) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in text.split_whitespace() {
            if let Some(v) = self.get(tok) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Some(acc)
    }
}

/// One annotated object in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub label: String,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DictionaryMeta {
    pub block: String,
    pub timestep: f64,
    pub conditioning: String,
    pub act_threshold: f64,
    pub iou_threshold: f64,
    pub n_images: u64,
    /// Images skipped because no annotation was supplied for them.
    pub missing_annotations: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConceptDictionary {
    pub meta: DictionaryMeta,
    /// Labels per concept, sorted by count descending then label.
    pub concepts: BTreeMap<usize, Vec<(String, u32)>>,
}

impl ConceptDictionary {
    pub fn labels(&self, cid: usize) -> &[(String, u32)] {
        self.concepts.get(&cid).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every concept carrying exactly `label` (compared lowercased).
    pub fn cids_for_label(&self, label: &str) -> Vec<usize> {
        let want = label.trim().to_lowercase();
        self.concepts
            .iter()
            .filter(|(_, labels)| labels.iter().any(|(l, _)| *l == want))
            .map(|(&cid, _)| cid)
            .collect()
    }
}

pub(crate) fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Accumulates label hits image by image; [`finish`](Self::finish) applies
/// the ordering rule, so builders over disjoint image sets can be merged in
/// any order.
#[derive(Debug, Clone)]
pub struct DictionaryBuilder {
    act_threshold: f64,
    iou_threshold: f64,
    counts: BTreeMap<usize, BTreeMap<String, u32>>,
    n_images: u64,
    missing: u64,
}

impl DictionaryBuilder {
    pub fn new(act_threshold: f64, iou_threshold: f64) -> Self {
        Self {
            act_threshold,
            iou_threshold,
            counts: BTreeMap::new(),
            n_images: 0,
            missing: 0,
        }
    }

    /// Adds one image. Object masks at any resolution are brought to the
    /// grid by area-majority downsampling.
    pub fn add_image<T: Scalar>(&mut self, grid: &LatentGrid<T>, objects: &[AnnotatedObject]) -> Result<()> {
        let (h, w) = (grid.h(), grid.w());
        let small: Vec<(String, Mask)> = objects
            .iter()
            .map(|o| {
                let m = if o.mask.h() == h && o.mask.w() == w {
                    o.mask.clone()
                } else {
                    o.mask.downsample_majority(h, w)?
                };
                Ok((normalize_label(&o.label), m))
            })
            .collect::<Result<_>>()?;
        for cid in grid.active_cids() {
            let act = binarize_map(&grid.channel_map(cid), h, w, self.act_threshold)?;
            for (label, mask) in &small {
                if iou(&act, mask)? > self.iou_threshold {
                    *self
                        .counts
                        .entry(cid)
                        .or_default()
                        .entry(label.clone())
                        .or_insert(0) += 1;
                }
            }
        }
        self.n_images += 1;
        Ok(())
    }

    pub fn note_missing_annotation(&mut self) {
        self.missing += 1;
    }

    pub fn merge(&mut self, other: DictionaryBuilder) {
        for (cid, labels) in other.counts {
            let entry = self.counts.entry(cid).or_default();
            for (label, n) in labels {
                *entry.entry(label).or_insert(0) += n;
            }
        }
        self.n_images += other.n_images;
        self.missing += other.missing;
    }

    pub fn finish(self, block: &str, timestep: f64, conditioning: &str) -> ConceptDictionary {
        let concepts = self
            .counts
            .into_iter()
            .map(|(cid, labels)| {
                let mut v: Vec<(String, u32)> = labels.into_iter().collect();
                v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                (cid, v)
            })
            .collect();
        ConceptDictionary {
            meta: DictionaryMeta {
                block: block.to_string(),
                timestep,
                conditioning: conditioning.to_string(),
                act_threshold: self.act_threshold,
                iou_threshold: self.iou_threshold,
                n_images: self.n_images,
                missing_annotations: self.missing,
            },
            concepts,
        }
    }
}

/// Hit-weighted mean embedding of a concept's labels. Labels with no
/// in-vocabulary token are skipped; `None` if nothing is left.
pub fn concept_embedding(dict: &ConceptDictionary, table: &EmbeddingTable, cid: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; table.dim()];
    let mut weight = 0.0;
    for (label, count) in dict.labels(cid) {
        if let Some(v) = table.phrase_embedding(label) {
            let c = f64::from(*count);
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += c * x;
            }
            weight += c;
        }
    }
    if weight == 0.0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= weight);
    Some(acc)
}

/// Embedding of every concept that has one.
pub fn concept_centroids(dict: &ConceptDictionary, table: &EmbeddingTable) -> BTreeMap<usize, Vec<f64>> {
    dict.concepts
        .keys()
        .filter_map(|&cid| concept_embedding(dict, table, cid).map(|v| (cid, v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: num_traits::Float::sqrt(var),
            n: values.len(),
        })
    }
}

/// Per-concept cohesion: mean cosine similarity between each distinct
/// embeddable label and the concept centroid. Concepts with fewer than two
/// embeddable labels are left out.
pub fn cohesion_per_concept(dict: &ConceptDictionary, table: &EmbeddingTable) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for &cid in dict.concepts.keys() {
        let embs: Vec<Vec<f64>> = dict
            .labels(cid)
            .iter()
            .filter_map(|(l, _)| table.phrase_embedding(l))
            .collect();
        if embs.len() < 2 {
            continue;
        }
        let Some(centroid) = concept_embedding(dict, table, cid) else {
            continue;
        };
        let sims: f64 = embs.iter().map(|e| cosine(e, &centroid)).sum();
        out.insert(cid, sims / embs.len() as f64);
    }
    out
}

pub fn cohesion(dict: &ConceptDictionary, table: &EmbeddingTable) -> Option<MeanStd> {
    let values: Vec<f64> = cohesion_per_concept(dict, table).into_values().collect();
    MeanStd::of(&values)
}

/// Mean and spread of the off-diagonal entries of the centroid cosine
/// similarity matrix. Lower means better separated.
pub fn separability(dict: &ConceptDictionary, table: &EmbeddingTable) -> Result<MeanStd> {
    let centroids: Vec<Vec<f64>> = concept_centroids(dict, table).into_values().collect();
    if centroids.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "separability needs at least 2 embeddable concepts, found {}",
            centroids.len()
        )));
    }
    let mut off = Vec::with_capacity(centroids.len() * (centroids.len() - 1));
    for (i, a) in centroids.iter().enumerate() {
        for (j, b) in centroids.iter().enumerate() {
            if i != j {
                off.push(cosine(a, b));
            }
        }
    }
    Ok(MeanStd::of(&off).expect("at least two off-diagonal entries"))
}

/// For each source concept, the target concept whose centroid is most
/// similar (ties to the lower id).
pub fn match_concepts(
    source: &ConceptDictionary,
    target: &ConceptDictionary,
    table: &EmbeddingTable,
    cids: &[usize],
) -> Result<BTreeMap<usize, usize>> {
    let targets = concept_centroids(target, table);
    if targets.is_empty() {
        return Err(Error::Empty("target dictionary embeddings"));
    }
    let mut out = BTreeMap::new();
    for &cid in cids {
        let src = concept_embedding(source, table, cid)
            .ok_or_else(|| Error::NotFound(alloc::format!("embedding for source concept {cid}")))?;
        let mut best: Option<(usize, f64)> = None;
        for (&tcid, t) in &targets {
            let s = cosine(&src, t);
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((tcid, s));
            }
        }
        out.insert(cid, best.expect("non-empty targets").0);
    }
    Ok(out)
}
