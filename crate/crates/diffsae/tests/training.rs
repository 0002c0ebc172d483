// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use diffsae::checkpoint::Checkpoint;
use diffsae::core::planted::PlantedProblem;
use diffsae::planted::generate_planted_shard;
use diffsae::trainer::{evaluate, train, train_with, TrainConfig, FINAL_CHECKPOINT_FILE};
use diffsae::Error;

fn planted(dir: &Path) -> (PlantedProblem, PathBuf) {
    let p = PlantedProblem::random(8, 24, 2, 0.01, 3).unwrap();
    let path = dir.join("planted.saeact");
    generate_planted_shard(&p, 200, 4, 4, 1, &path).unwrap();
    (p, path)
}

fn config() -> TrainConfig {
    TrainConfig {
        d: 8,
        n_f: 24,
        k: 2,
        k_aux: 4,
        batch_size: 64,
        n_epochs: 3,
        learning_rate: 1e-3,
        checkpoint_every: 40,
        shuffle_seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, shard) = planted(dir.path());
    let cfg = TrainConfig { n_epochs: 0, ..config() };
    let out = train(&cfg, std::slice::from_ref(&shard), &[], &dir.path().join("run")).unwrap();
    assert_eq!(out.manifest.steps, 0);
    assert_eq!(out.manifest.final_loss, None);
    assert!(out.manifest.checkpoints.is_empty());
    assert_eq!(out.manifest.train_report.scaled_mse, out.manifest.initial_scaled_mse);
    let saved = Checkpoint::load(&dir.path().join("run").join(FINAL_CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved, out.checkpoint);
    assert_eq!(saved.optimizer.step, 0);
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_, shard) = planted(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&config(), std::slice::from_ref(&shard), &[], &a).unwrap();
    train(&config(), std::slice::from_ref(&shard), &[], &b).unwrap();
    assert_eq!(fs::read(a.join(FINAL_CHECKPOINT_FILE)).unwrap(), fs::read(b.join(FINAL_CHECKPOINT_FILE)).unwrap());
    let c = dir.path().join("c");
    train(&TrainConfig { shuffle_seed: 18, ..config() }, std::slice::from_ref(&shard), &[], &c).unwrap();
    assert_ne!(fs::read(a.join(FINAL_CHECKPOINT_FILE)).unwrap(), fs::read(c.join(FINAL_CHECKPOINT_FILE)).unwrap());
}

#[test]
fn training_lowers_reconstruction_error() {
    let dir = tempfile::tempdir().unwrap();
    let (p, shard) = planted(dir.path());
    let holdout = dir.path().join("holdout.saeact");
    generate_planted_shard(&p, 20, 4, 4, 2, &holdout).unwrap();
    let mut steps = Vec::new();
    let out = train_with(&config(), std::slice::from_ref(&shard), std::slice::from_ref(&holdout), &dir.path().join("run"), |s| {
        steps.push(s.step)
    })
    .unwrap();
    let m = &out.manifest;
    assert_eq!(m.n_vectors, 3200);
    assert_eq!(m.steps, 150);
    assert_eq!(steps, (1..=150).collect::<Vec<u64>>());
    assert!(m.train_report.scaled_mse < m.initial_scaled_mse);
    assert!(m.holdout_report.unwrap().scaled_mse < m.initial_scaled_mse);
    assert_eq!(m.checkpoints.len(), 3);
    for rel in &m.checkpoints {
        assert!(dir.path().join("run").join(rel).exists());
    }
    let again = evaluate(&out.checkpoint.model, std::slice::from_ref(&shard), 2).unwrap();
    assert_eq!(again, m.train_report);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(&out.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["steps"], 150);
    assert_eq!(manifest["shards"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, shard) = planted(dir.path());
    let cfg = TrainConfig { d: 9, ..config() };
    assert!(matches!(train(&cfg, &[shard], &[], &dir.path().join("run")), Err(Error::Config(_))));
    let bad = TrainConfig { k: 0, ..config() };
    assert!(bad.validate().is_err());
}
