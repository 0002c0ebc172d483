// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-dictionary shards: synthetic training data with known atoms.

use std::path::Path;

use diffsae_core::planted::{PlantedProblem, PlantedSample};

use crate::error::{Error, Result};
use crate::shard::{write_shard_file, ImageRecord, ShardHeader, ShardMeta};

pub fn planted_meta(timestep: f64) -> ShardMeta {
    ShardMeta {
        block: "planted".into(),
        timestep,
        conditioning: "cond".into(),
        prompt_source: "planted".into(),
    }
}

/// Splits `n_images · h · w` planted vectors into image records with ids
/// `first_id..`, drawing from sample stream `stream` of the problem.
pub fn planted_records(
    problem: &PlantedProblem,
    n_images: usize,
    h: usize,
    w: usize,
    first_id: u64,
    stream: u64,
) -> Result<(Vec<ImageRecord>, PlantedSample)> {
    if h * w == 0 {
        return Err(Error::config("planted grid must have at least one location"));
    }
    let sample = problem.generate_stream(n_images * h * w, stream);
    let per = h * w * problem.d;
    let records = sample
        .vectors
        .chunks_exact(per)
        .enumerate()
        .map(|(i, data)| ImageRecord {
            image_id: first_id + i as u64,
            data: data.to_vec(),
        })
        .collect();
    Ok((records, sample))
}

/// Writes a planted shard and returns the ground-truth codes, one per
/// vector in file order.
pub fn generate_planted_shard(
    problem: &PlantedProblem,
    n_images: usize,
    h: usize,
    w: usize,
    stream: u64,
    path: &Path,
) -> Result<PlantedSample> {
    let (records, sample) = planted_records(problem, n_images, h, w, 0, stream)?;
    let header = ShardHeader::new(problem.d as u32, h as u32, w as u32, n_images as u64, planted_meta(1.0));
    write_shard_file(path, &header, &records)?;
    Ok(sample)
}
