// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffsae::core::Mask;
use diffsae::formats::RleMask;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diffsae"));
    c.env_remove("RUST_LOG");
    for (k, _) in std::env::vars() {
        if k.starts_with("DIFFSAE_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> i32 {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> i32 {
    let mut c = bin();
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    let out = c.output().unwrap();
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["train", "--out", "/nonexistent"]), 2);
}

#[test]
fn failures_still_write_a_run_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    assert_eq!(run(&["gen-planted", "--seed", "1", "--d", "4", "--n-f", "8", "--k-true", "1", "--n-images", "4", "--out", s(&g)]), 0);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"d": 5, "n_f": 8, "k": 1, "batch_size": 16, "k_aux": 2}"#).unwrap();
    let t = dir.path().join("t");
    let shard = g.join("planted.saeact");
    assert_eq!(run(&["train", "--seed", "1", "--config", s(&cfg), "--shards", s(&shard), "--out", s(&t)]), 2);
    let m = read_json(&t.join("run_manifest.json"));
    assert_eq!(m["exit_code"], 2);
    assert!(m["error"].as_str().unwrap().contains("d"));

    let e = dir.path().join("e");
    let missing = dir.path().join("missing.saeckpt");
    assert_eq!(run(&["eval", "--checkpoint", s(&missing), "--shards", s(&shard), "--out", s(&e)]), 3);
    assert_eq!(read_json(&e.join("run_manifest.json"))["exit_code"], 3);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"d": 4, "bogus": 1}"#).unwrap();
    let t2 = dir.path().join("t2");
    assert_eq!(run(&["train", "--seed", "1", "--config", s(&bad), "--shards", s(&shard), "--out", s(&t2)]), 2);
}

#[test]
fn environment_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    assert_eq!(run(&["gen-planted", "--seed", "1", "--d", "4", "--n-f", "8", "--k-true", "1", "--n-images", "4", "--out", s(&g)]), 0);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"d": 4, "n_f": 8, "k": 1, "batch_size": 16, "k_aux": 2, "n_epochs": 3}"#).unwrap();
    let t = dir.path().join("t");
    let shard = g.join("planted.saeact");
    let code = run_env(
        &["train", "--seed", "9", "--config", s(&cfg), "--shards", s(&shard), "--out", s(&t)],
        &[("DIFFSAE_N_EPOCHS", "1"), ("DIFFSAE_SHUFFLE_SEED", "4")],
    );
    assert_eq!(code, 0);
    let m = read_json(&t.join("manifest.json"));
    assert_eq!(m["config"]["n_epochs"], 1);
    assert_eq!(m["config"]["shuffle_seed"], 9);
    assert_eq!(m["steps"], 16);
}

/// Annotations from the ground-truth codes: an object covers the locations
/// where its planted atom is active.
fn write_fixtures(dir: &Path, gen: &Path, n_images: usize, hw: usize) {
    let codes: Vec<Value> = fs::read_to_string(gen.join("planted_codes.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let labels = [(0usize, "apple"), (1, "pear"), (2, "sky")];
    let mut ann = String::new();
    let mut prompts = String::new();
    for img in 0..n_images {
        let mut objects = Vec::new();
        for (atom, label) in labels {
            let mask = Mask::from_fn(hw, hw, |i, j| {
                let v = &codes[img * hw * hw + i * hw + j];
                v["indices"].as_array().unwrap().iter().any(|x| x.as_u64() == Some(atom as u64))
            });
            if !mask.is_empty() {
                objects.push(json!({"label": label, "mask": RleMask::from_mask(&mask)}));
            }
        }
        ann.push_str(&json!({"image_id": img, "objects": objects}).to_string());
        ann.push('\n');
        prompts.push_str(&json!({"image_id": img, "nouns": ["apple", "pear", "unicorn"]}).to_string());
        prompts.push('\n');
    }
    fs::write(dir.join("annotations.jsonl"), ann).unwrap();
    fs::write(dir.join("prompts.jsonl"), prompts).unwrap();
    fs::write(dir.join("embeddings.tsv"), "#dim 3\napple\t1\t0\t0\npear\t0\t1\t0\nsky\t0\t0.5\t1\n").unwrap();
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let g = root.join("gen");
    let argv = ["gen-planted", "--seed", "3", "--d", "8", "--n-f", "6", "--k-true", "1", "--sigma", "0.01"];
    assert_eq!(run(&[&argv[..], &["--n-images", "40", "--height", "4", "--width", "4", "--codes", "--out", s(&g)]].concat()), 0);
    write_fixtures(root, &g, 40, 4);
    let cfg = root.join("cfg.json");
    fs::write(&cfg, r#"{"d": 8, "n_f": 12, "k": 1, "k_aux": 2, "batch_size": 32, "n_epochs": 30, "learning_rate": 0.01, "checkpoint_every": 1000}"#).unwrap();
    let shard = g.join("planted.saeact");
    let t = root.join("train");
    assert_eq!(run(&["train", "--seed", "5", "--config", s(&cfg), "--shards", s(&shard), "--out", s(&t), "--threads", "2"]), 0);
    let ck = t.join("final.saeckpt");
    let b = root.join("dict");
    let ann = root.join("annotations.jsonl");
    assert_eq!(run(&["build-dict", "--checkpoint", s(&ck), "--shards", s(&shard), "--annotations", s(&ann), "--out", s(&b), "--threads", "3"]), 0);
    let p = root.join("pred");
    let emb = root.join("embeddings.tsv");
    let prompts = root.join("prompts.jsonl");
    let dict = b.join("dictionary.json");
    let common = [
        "--checkpoint", s(&ck), "--shards", s(&shard), "--dictionary", s(&dict), "--embeddings", s(&emb),
        "--prompts", s(&prompts),
    ];
    assert_eq!(run(&[&["predict-composition"][..], &common, &["--out", s(&p), "--dump-pgm"]].concat()), 0);
    let c = root.join("comp");
    assert_eq!(run(&[&["eval-composition"][..], &common, &["--annotations", s(&ann), "--out", s(&c)]].concat()), 0);

    let mut out = Vec::new();
    let mut files: Vec<PathBuf> = vec![ck, dict, p.join("predictions.json"), c.join("composition_report.json")];
    let mut masks: Vec<PathBuf> = fs::read_dir(p.join("masks")).unwrap().map(|e| e.unwrap().path()).collect();
    masks.sort();
    files.extend(masks);
    for f in files {
        out.push((f.strip_prefix(root).unwrap().display().to_string(), fs::read(&f).unwrap()));
    }
    let mut manifest = read_json(&t.join("manifest.json"));
    manifest.as_object_mut().unwrap().remove("wall_clock_secs");
    for entry in manifest["shards"].as_array_mut().unwrap() {
        entry["path"] = Value::Null;
    }
    out.push(("train/manifest.json".into(), manifest.to_string().into_bytes()));
    out
}

#[test]
fn planted_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    assert_eq!(ra.len(), rb.len());
    for ((na, da), (nb, db)) in ra.iter().zip(&rb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
    let dict: Value = serde_json::from_slice(&ra[1].1).unwrap();
    assert!(!dict["concepts"].as_object().unwrap().is_empty(), "{dict}");
    let report: Value = serde_json::from_slice(&ra[3].1).unwrap();
    assert!(report["mean_iou"].as_f64().unwrap() > 0.0, "{report}");
}
