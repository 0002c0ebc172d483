// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shuffled fixed-size batches over every spatial vector of a shard set.
//!
//! Shuffling permutes an in-memory index of vector positions; shard files are
//! never rewritten. Each epoch uses its own permutation, derived from the
//! shuffle seed and the epoch number.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::shard::{ShardHeader, ShardReader};

/// Shard sets up to this many payload bytes are read into memory once.
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

/// Opens every shard and checks they agree on `d`.
pub fn open_shards(paths: &[PathBuf]) -> Result<Vec<ShardReader>> {
    if paths.is_empty() {
        return Err(Error::config("no shards given"));
    }
    let readers = paths
        .iter()
        .map(|p| ShardReader::open(p))
        .collect::<Result<Vec<_>>>()?;
    let d = readers[0].header().d;
    for (r, p) in readers.iter().zip(paths) {
        if r.header().d != d {
            return Err(Error::format(format!(
                "{}: d = {} but {} has d = {d}",
                p.display(),
                r.header().d,
                paths[0].display()
            )));
        }
    }
    Ok(readers)
}

enum Store {
    Memory(Vec<f32>),
    Files(Vec<ShardReader>),
}

pub struct BatchStream {
    store: Store,
    headers: Vec<ShardHeader>,
    /// Cumulative vector counts: shard `s` owns `[starts[s], starts[s+1])`.
    starts: Vec<u64>,
    d: usize,
    batch_size: usize,
    seed: u64,
    order: Vec<u64>,
    pos: usize,
}

impl BatchStream {
    pub fn open(paths: &[PathBuf], batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        Self::open_with_budget(paths, batch_size, shuffle_seed, DEFAULT_MEMORY_BUDGET)
    }

    /// Like [`open`](Self::open); shard sets larger than `memory_budget` bytes
    /// are read vector by vector from disk instead of being cached.
    pub fn open_with_budget(
        paths: &[PathBuf],
        batch_size: usize,
        shuffle_seed: u64,
        memory_budget: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let mut readers = open_shards(paths)?;
        let headers: Vec<ShardHeader> = readers.iter().map(|r| r.header().clone()).collect();
        let d = headers[0].d as usize;
        let mut starts = vec![0u64];
        for h in &headers {
            let n = h.n_images * h.locations() as u64;
            starts.push(starts.last().copied().unwrap_or(0) + n);
        }
        let total = *starts.last().unwrap_or(&0);
        let store = if total.saturating_mul(4 * d as u64) <= memory_budget {
            let mut data = Vec::with_capacity(total as usize * d);
            for r in &mut readers {
                for rec in r.records() {
                    data.extend_from_slice(&rec?.data);
                }
            }
            Store::Memory(data)
        } else {
            Store::Files(readers)
        };
        let mut stream = Self {
            store,
            headers,
            starts,
            d,
            batch_size,
            seed: shuffle_seed,
            order: Vec::new(),
            pos: 0,
        };
        stream.set_epoch(0);
        Ok(stream)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn total_vectors(&self) -> u64 {
        *self.starts.last().unwrap_or(&0)
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.total_vectors().div_ceil(self.batch_size as u64)
    }

    pub fn headers(&self) -> &[ShardHeader] {
        &self.headers
    }

    /// Rewinds to the start of `epoch` with that epoch's permutation.
    pub fn set_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        self.order = (0..self.total_vectors()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn fetch(&mut self, global: u64, out: &mut [f32]) -> Result<()> {
        match &mut self.store {
            Store::Memory(data) => {
                let o = global as usize * self.d;
                out.copy_from_slice(&data[o..o + self.d]);
                Ok(())
            }
            Store::Files(readers) => {
                let s = self.starts.partition_point(|&st| st <= global) - 1;
                let local = global - self.starts[s];
                let locs = self.headers[s].locations() as u64;
                readers[s].read_vector(local / locs, (local % locs) as usize, out)
            }
        }
    }

    /// The next `batch × d` row-major batch of this epoch, if any.
    pub fn next_batch(&mut self) -> Option<Result<Vec<f32>>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let mut batch = vec![0.0f32; (end - self.pos) * self.d];
        for (row, slot) in (self.pos..end).zip(batch.chunks_exact_mut(self.d)) {
            let g = self.order[row];
            if let Err(e) = self.fetch(g, slot) {
                self.pos = self.order.len();
                return Some(Err(e));
            }
        }
        self.pos = end;
        Some(Ok(batch))
    }
}

impl Iterator for BatchStream {
    type Item = Result<Vec<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

/// One epoch of batches with the default memory budget.
pub fn stream_batches(shards: &[PathBuf], batch_size: usize, shuffle_seed: u64) -> Result<BatchStream> {
    BatchStream::open(shards, batch_size, shuffle_seed)
}

/// Visits every image of every shard in file order.
pub fn for_each_image(
    shards: &[PathBuf],
    mut f: impl FnMut(&Path, &ShardHeader, crate::shard::ImageRecord) -> Result<()>,
) -> Result<()> {
    for (path, mut reader) in shards.iter().zip(open_shards(shards)?) {
        let header = reader.header().clone();
        for rec in reader.records() {
            f(path, &header, rec?)?;
        }
    }
    Ok(())
}
