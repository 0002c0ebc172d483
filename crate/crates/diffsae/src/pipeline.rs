// SPDX-License-Identifier: MIT OR Apache-2.0

//! Workflows over whole shard sets. Images are processed in parallel in
//! fixed-size chunks and results are combined in file order, so output does
//! not depend on the thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffsae_core::analysis::{concept_intensity, rank_top_examples, ConceptIntensity, ContextFreeConcept, SpatialVariance};
use diffsae_core::composition::{conceptual_map, predict_mask, target_embedding, CompositionReport};
use diffsae_core::concepts::{concept_centroids, ConceptDictionary, DictionaryBuilder, EmbeddingTable};
use diffsae_core::intervention::{ResolvedEdit, TimestepWindow};
use diffsae_core::{LatentGrid, Mask, SaeModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::batches::open_shards;
use crate::error::{Error, Result};
use crate::formats::AnnotationSet;
use crate::shard::{write_shard_file, ImageRecord, ShardHeader};
use crate::trainer::thread_pool;

/// Images handed to the thread pool at once.
const CHUNK_IMAGES: usize = 64;

/// Runs `f` on every image of every shard and returns the results in file
/// order.
pub fn map_images<R: Send>(
    shards: &[PathBuf],
    threads: usize,
    f: impl Fn(&ShardHeader, &ImageRecord) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let pool = thread_pool(threads)?;
    let mut out = Vec::new();
    for mut reader in open_shards(shards)? {
        let header = reader.header().clone();
        let mut index = 0u64;
        while index < header.n_images {
            let end = (index + CHUNK_IMAGES as u64).min(header.n_images);
            let chunk = (index..end)
                .map(|i| reader.read_record(i))
                .collect::<Result<Vec<_>>>()?;
            let results = pool.install(|| chunk.par_iter().map(|rec| f(&header, rec)).collect::<Result<Vec<_>>>())?;
            out.extend(results);
            index = end;
        }
    }
    Ok(out)
}

pub fn check_model_dims(model: &SaeModel<f32>, shards: &[PathBuf]) -> Result<()> {
    let readers = open_shards(shards)?;
    let d = readers[0].header().d as usize;
    if d != model.d() {
        return Err(Error::config(format!("shards have d = {d}, model has d = {}", model.d())));
    }
    Ok(())
}

pub fn encode_record(model: &SaeModel<f32>, header: &ShardHeader, rec: &ImageRecord) -> Result<LatentGrid<f32>> {
    Ok(LatentGrid::encode(model, &rec.data, header.h as usize, header.w as usize)?)
}

/// Concept dictionary over every image; metadata comes from the first shard.
pub fn build_dictionary(
    model: &SaeModel<f32>,
    shards: &[PathBuf],
    annotations: &AnnotationSet,
    act_threshold: f64,
    iou_threshold: f64,
    threads: usize,
) -> Result<ConceptDictionary> {
    check_model_dims(model, shards)?;
    let first = open_shards(shards)?[0].header().meta.clone();
    let partials = map_images(shards, threads, |header, rec| {
        let mut b = DictionaryBuilder::new(act_threshold, iou_threshold);
        match annotations.get(&rec.image_id) {
            Some(objects) => b.add_image(&encode_record(model, header, rec)?, objects)?,
            None => b.note_missing_annotation(),
        }
        Ok(b)
    })?;
    let mut builder = DictionaryBuilder::new(act_threshold, iou_threshold);
    for p in partials {
        builder.merge(p);
    }
    Ok(builder.finish(&first.block, first.timestep, &first.conditioning))
}

/// Composition prediction scored against annotations. Every image named in
/// `prompts` must be present in the shards.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_composition(
    model: &SaeModel<f32>,
    shards: &[PathBuf],
    dict: &ConceptDictionary,
    table: &EmbeddingTable,
    annotations: &AnnotationSet,
    prompts: &BTreeMap<u64, Vec<String>>,
    sim_threshold: f64,
    threads: usize,
) -> Result<CompositionReport> {
    check_model_dims(model, shards)?;
    let centroids = concept_centroids(dict, table);
    let partials = map_images(shards, threads, |header, rec| {
        let Some(nouns) = prompts.get(&rec.image_id) else {
            return Ok(None);
        };
        let grid = encode_record(model, header, rec)?;
        let cmap = conceptual_map(&grid, &centroids, table.dim())?;
        let mut part = CompositionReport::new(sim_threshold);
        let objects = annotations.get(&rec.image_id).map(Vec::as_slice).unwrap_or(&[]);
        part.add_image(rec.image_id, &cmap, table, nouns, objects)?;
        Ok(Some((rec.image_id, part)))
    })?;
    let mut report = CompositionReport::new(sim_threshold);
    let mut seen = std::collections::BTreeSet::new();
    for (id, part) in partials.into_iter().flatten() {
        seen.insert(id);
        report.pairs.extend(part.pairs);
        report.skipped_no_embedding += part.skipped_no_embedding;
        report.skipped_not_detected += part.skipped_not_detected;
    }
    if let Some(missing) = prompts.keys().find(|id| !seen.contains(id)) {
        return Err(Error::format(format!("image {missing} has prompt nouns but no shard record")));
    }
    report.finalize();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub noun: String,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub items: Vec<Prediction>,
    pub skipped_no_embedding: u64,
}

/// Predicted masks for every (image, noun) pair, without ground truth.
pub fn predict_composition(
    model: &SaeModel<f32>,
    shards: &[PathBuf],
    dict: &ConceptDictionary,
    table: &EmbeddingTable,
    prompts: &BTreeMap<u64, Vec<String>>,
    sim_threshold: f64,
    threads: usize,
) -> Result<Predictions> {
    check_model_dims(model, shards)?;
    let centroids = concept_centroids(dict, table);
    let partials = map_images(shards, threads, |header, rec| {
        let Some(nouns) = prompts.get(&rec.image_id) else {
            return Ok(Predictions::default());
        };
        let grid = encode_record(model, header, rec)?;
        let cmap = conceptual_map(&grid, &centroids, table.dim())?;
        let mut nouns: Vec<String> = nouns.iter().map(|n| n.trim().to_lowercase()).collect();
        nouns.sort();
        nouns.dedup();
        let mut part = Predictions::default();
        for noun in nouns {
            match target_embedding(table, &noun) {
                Ok(target) => part.items.push(Prediction {
                    image_id: rec.image_id,
                    mask: predict_mask(&cmap, &target, sim_threshold)?,
                    noun,
                }),
                Err(_) => part.skipped_no_embedding += 1,
            }
        }
        Ok(part)
    })?;
    let mut all = Predictions::default();
    for p in partials {
        all.items.extend(p.items);
        all.skipped_no_embedding += p.skipped_no_embedding;
    }
    all.items
        .sort_by(|a, b| a.image_id.cmp(&b.image_id).then_with(|| a.noun.cmp(&b.noun)));
    Ok(all)
}

/// Images ranked by mean intensity of concept `cid`.
pub fn top_examples(
    model: &SaeModel<f32>,
    shards: &[PathBuf],
    cid: usize,
    top_n: usize,
    threads: usize,
) -> Result<Vec<ConceptIntensity>> {
    check_model_dims(model, shards)?;
    if cid >= model.n_f() {
        return Err(Error::config(format!("concept {cid} out of range for n_f = {}", model.n_f())));
    }
    let items = map_images(shards, threads, |header, rec| {
        let grid = encode_record(model, header, rec)?;
        Ok(ConceptIntensity {
            cid,
            image_id: rec.image_id,
            gamma: concept_intensity(&grid, cid),
        })
    })?;
    if items.is_empty() {
        return Err(Error::format("shards contain no images"));
    }
    Ok(rank_top_examples(items, top_n))
}

/// Deterministic validation split: images whose id is `remainder` modulo
/// `modulo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Split {
    pub modulo: u64,
    pub remainder: u64,
}

impl Split {
    pub const ALL: Split = Split {
        modulo: 1,
        remainder: 0,
    };

    pub fn new(modulo: u64, remainder: u64) -> Result<Self> {
        if modulo == 0 || remainder >= modulo {
            return Err(Error::config("split needs modulo >= 1 and remainder < modulo"));
        }
        Ok(Self { modulo, remainder })
    }

    pub fn contains(&self, image_id: u64) -> bool {
        image_id % self.modulo == self.remainder
    }
}

/// Concepts with the least cross-image spatial variance over a split.
pub fn context_free_concepts(
    model: &SaeModel<f32>,
    shards: &[PathBuf],
    bottom_n: usize,
    split: Split,
    threads: usize,
) -> Result<(Vec<ContextFreeConcept>, u64)> {
    check_model_dims(model, shards)?;
    let grids = map_images(shards, threads, |header, rec| {
        if split.contains(rec.image_id) {
            encode_record(model, header, rec).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let mut stats: Option<SpatialVariance> = None;
    for g in grids.into_iter().flatten() {
        let s = stats.get_or_insert_with(|| SpatialVariance::new(model.n_f(), g.h(), g.w()));
        s.add(&g)?;
    }
    let stats = stats.ok_or_else(|| Error::format("split selects no images"))?;
    Ok((stats.context_free(bottom_n)?, stats.n_images()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EditShardStats {
    pub images_edited: u64,
    pub images_copied: u64,
}

/// Applies `edit` to every image of a shard whose timestep lies in `window`;
/// other shards are copied unchanged. Output keeps the input header.
pub fn edit_shard(
    model: &SaeModel<f32>,
    edit: &ResolvedEdit,
    window: TimestepWindow,
    input: &Path,
    output: &Path,
    threads: usize,
) -> Result<EditShardStats> {
    let inputs = [input.to_path_buf()];
    check_model_dims(model, &inputs)?;
    let header = open_shards(&inputs)?[0].header().clone();
    let active = window.contains(header.meta.timestep);
    let records = map_images(&inputs, threads, |h, rec| {
        if !active {
            return Ok(rec.clone());
        }
        Ok(ImageRecord {
            image_id: rec.image_id,
            data: edit.apply(model, &rec.data, h.h as usize, h.w as usize)?,
        })
    })?;
    write_shard_file(output, &header, &records)?;
    let n = records.len() as u64;
    Ok(if active {
        EditShardStats {
            images_edited: n,
            images_copied: 0,
        }
    } else {
        EditShardStats {
            images_edited: 0,
            images_copied: n,
        }
    })
}
