// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training driver: epochs of shuffled batches, Adam, dead-latent tracking,
//! periodic checkpoints and a `manifest.json` describing the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use diffsae_core::metrics::{EvalReport, MeanPass};
use diffsae_core::tracker::DEFAULT_DEAD_THRESHOLD_STEPS;
use diffsae_core::{adam_step, loss_and_grads, DeadLatentTracker, OptimizerState, SaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batches::{open_shards, BatchStream};
use crate::checkpoint::{Checkpoint, CHECKPOINT_EXTENSION};
use crate::error::{Error, Result};
use crate::manifest::{digest_files, write_json, FileDigest, TOOL_VERSION};

pub const TRAIN_MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT_FILE: &str = "final.saeckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub d: usize,
    pub learning_rate: f64,
    pub k_aux: usize,
    pub n_epochs: u64,
    pub n_f: usize,
    pub k: usize,
    pub dead_threshold_steps: u64,
    pub shuffle_seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 32.0,
            batch_size: 4096,
            d: 1280,
            learning_rate: 1e-4,
            k_aux: 256,
            n_epochs: 1,
            n_f: 5120,
            k: 10,
            dead_threshold_steps: DEFAULT_DEAD_THRESHOLD_STEPS,
            shuffle_seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size as u64),
            ("d", self.d as u64),
            ("k_aux", self.k_aux as u64),
            ("n_f", self.n_f as u64),
            ("k", self.k as u64),
            ("dead_threshold_steps", self.dead_threshold_steps),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.n_f < self.d {
            return Err(Error::config("n_f must be at least d"));
        }
        if self.k > self.n_f {
            return Err(Error::config("k must not exceed n_f"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha must be finite and non-negative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub shards: Vec<FileDigest>,
    pub holdout_shards: Vec<FileDigest>,
    pub n_vectors: u64,
    pub steps: u64,
    pub initial_scaled_mse: f64,
    pub final_loss: Option<f64>,
    /// Dead fraction by the training tracker at the last step.
    pub tracker_dead_fraction: f64,
    pub train_report: EvalReport,
    pub holdout_report: Option<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub manifest: TrainManifest,
    pub manifest_path: PathBuf,
}

/// Per-step progress passed to the observer given to [`train_with`].
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    pub steps_total: u64,
    pub loss: f64,
    pub rec: f64,
    pub aux: f64,
    pub dead_fraction: f64,
}

pub fn train(config: &TrainConfig, shards: &[PathBuf], holdout: &[PathBuf], out_dir: &Path) -> Result<TrainOutcome> {
    train_with(config, shards, holdout, out_dir, |_| {})
}

/// The initial model: random unit-norm decoder columns, encoder tied to the
/// decoder, bias at the mean of the first epoch-0 batch.
pub fn initial_model(config: &TrainConfig, stream: &mut BatchStream) -> Result<SaeModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    rng.set_stream(u64::MAX);
    let mut model = SaeModel::init_random(config.d, config.n_f, config.k, &mut rng)?;
    stream.set_epoch(0);
    let first = stream
        .next_batch()
        .ok_or_else(|| Error::format("training shards contain no vectors"))??;
    model.set_bias_to_mean(&first)?;
    stream.set_epoch(0);
    Ok(model)
}

pub fn train_with(
    config: &TrainConfig,
    shards: &[PathBuf],
    holdout: &[PathBuf],
    out_dir: &Path,
    mut observe: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    let mut stream = BatchStream::open(shards, config.batch_size, config.shuffle_seed)?;
    if stream.d() != config.d {
        return Err(Error::config(format!(
            "shards have d = {} but config.d = {}",
            stream.d(),
            config.d
        )));
    }
    if !holdout.is_empty() {
        let d = open_shards(holdout)?[0].header().d as usize;
        if d != config.d {
            return Err(Error::config(format!("holdout shards have d = {d} but config.d = {}", config.d)));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(Error::at(out_dir))?;
    let ckpt_dir = out_dir.join("checkpoints");

    let mut model = initial_model(config, &mut stream)?;
    let initial_scaled_mse = evaluate(&model, shards, 1)?.scaled_mse;
    let mut opt = OptimizerState::for_model(&model, config.learning_rate);
    let mut tracker = DeadLatentTracker::new(config.n_f, config.dead_threshold_steps);
    let alpha = config.alpha as f32;
    let steps_total = config.n_epochs * stream.batches_per_epoch();
    let mut checkpoints = Vec::new();
    let mut final_loss = None;

    for epoch in 0..config.n_epochs {
        stream.set_epoch(epoch);
        while let Some(batch) = stream.next_batch() {
            let batch = batch?;
            let lg = loss_and_grads(&model, &batch, &tracker, alpha, config.k_aux)?;
            adam_step(&mut model, &mut opt, &lg.grads)?;
            let step = opt.step;
            tracker.update(&lg.active_sets, step)?;
            if !model.params_finite() {
                return Err(Error::format(format!("parameters became non-finite at step {step}")));
            }
            final_loss = Some(f64::from(lg.loss.total));
            observe(&StepLog {
                epoch,
                step,
                steps_total,
                loss: f64::from(lg.loss.total),
                rec: f64::from(lg.loss.rec),
                aux: f64::from(lg.loss.aux),
                dead_fraction: tracker.dead_fraction(),
            });
            if step % config.checkpoint_every == 0 {
                std::fs::create_dir_all(&ckpt_dir).map_err(Error::at(&ckpt_dir))?;
                let rel = PathBuf::from("checkpoints").join(format!("step-{step:08}.{CHECKPOINT_EXTENSION}"));
                Checkpoint {
                    model: model.clone(),
                    optimizer: opt.clone(),
                }
                .save(&out_dir.join(&rel))?;
                checkpoints.push(rel);
            }
        }
    }

    let checkpoint = Checkpoint {
        model,
        optimizer: opt,
    };
    checkpoint.save(&out_dir.join(FINAL_CHECKPOINT_FILE))?;
    let train_report = evaluate(&checkpoint.model, shards, 1)?;
    let holdout_report = if holdout.is_empty() {
        None
    } else {
        Some(evaluate(&checkpoint.model, holdout, 1)?)
    };
    let manifest = TrainManifest {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        seed: config.shuffle_seed,
        shards: digest_files(shards)?,
        holdout_shards: digest_files(holdout)?,
        n_vectors: stream.total_vectors(),
        steps: checkpoint.optimizer.step,
        initial_scaled_mse,
        final_loss,
        tracker_dead_fraction: tracker.dead_fraction(),
        train_report,
        holdout_report,
        checkpoints,
        final_checkpoint: PathBuf::from(FINAL_CHECKPOINT_FILE),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out_dir.join(TRAIN_MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;
    Ok(TrainOutcome {
        checkpoint,
        manifest,
        manifest_path,
    })
}

fn reconstruct_image(model: &SaeModel<f32>, data: &[f32]) -> Result<(Vec<f32>, Vec<usize>)> {
    let d = model.d();
    let per_vector = data
        .par_chunks(d)
        .map(|x| {
            let z = model.encode(x)?;
            let xh = model.decode(&z)?;
            Ok((xh, z.indices))
        })
        .collect::<Result<Vec<_>, diffsae_core::Error>>()?;
    let mut recon = Vec::with_capacity(data.len());
    let mut fired = Vec::new();
    for (xh, idx) in per_vector {
        recon.extend_from_slice(&xh);
        fired.extend(idx);
    }
    Ok((recon, fired))
}

/// Scaled MSE and explained variance over every vector of `shards`.
///
/// `dead_fraction` is the fraction of latents that never fire on this set,
/// so the whole report can be recomputed from a checkpoint and the shards.
pub fn evaluate(model: &SaeModel<f32>, shards: &[PathBuf], threads: usize) -> Result<EvalReport> {
    let pool = thread_pool(threads)?;
    pool.install(|| {
        let mut readers = open_shards(shards)?;
        let d = readers[0].header().d as usize;
        if d != model.d() {
            return Err(Error::config(format!("shards have d = {d}, model has d = {}", model.d())));
        }
        let mut fired = vec![false; model.n_f()];
        let mut first = MeanPass::new(d);
        for r in &mut readers {
            for rec in r.records() {
                let rec = rec?;
                let (recon, active) = reconstruct_image(model, &rec.data)?;
                for i in active {
                    fired[i] = true;
                }
                for (x, xh) in rec.data.chunks_exact(d).zip(recon.chunks_exact(d)) {
                    first.push(x, xh)?;
                }
            }
        }
        let mut second = first.finish()?;
        for r in &mut readers {
            for rec in r.records() {
                let rec = rec?;
                let (recon, _) = reconstruct_image(model, &rec.data)?;
                for (x, xh) in rec.data.chunks_exact(d).zip(recon.chunks_exact(d)) {
                    second.push(x, xh)?;
                }
            }
        }
        let dead = fired.iter().filter(|f| !**f).count() as f64 / model.n_f() as f64;
        Ok(second.finish(dead)?)
    })
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}
