// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `diffsae` command line. Every subcommand writes into `--out` only and
//! leaves a `run_manifest.json` there, also when it fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use diffsae_core::analysis::{edit_success_table, quadrant_success, RANDOM_QUADRANT_BASELINE};
use diffsae_core::composition::DEFAULT_SIM_THRESHOLD;
use diffsae_core::concepts::{
    cohesion, cohesion_per_concept, concept_centroids, match_concepts, separability, ConceptDictionary,
    DEFAULT_ACT_THRESHOLD, DEFAULT_IOU_THRESHOLD,
};
use diffsae_core::planted::{dictionary_recovery_score, PlantedProblem};
use diffsae_core::scalar::cosine;
use diffsae_core::Quadrant;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::load_model;
use crate::error::{Error, Result};
use crate::formats::{
    read_annotations, read_edit_records, read_embeddings, read_jsonl, read_prompt_nouns, write_jsonl,
    write_mask_pgm, RleMask, ScoreMapEntry,
};
use crate::manifest::{digest_files, read_json, write_json, RunManifest, RUN_MANIFEST_FILE, TOOL_VERSION};
use crate::pipeline::{self, Split};
use crate::plan::load_plan;
use crate::planted::{planted_meta, planted_records};
use crate::protocol::{serve_tcp, EditServer};
use crate::shard::{write_shard_file, ShardHeader, SHARD_EXTENSION};
use crate::trainer::{evaluate, train_with, TrainConfig};

/// Prefix of environment variables that override configuration keys, e.g.
/// `DIFFSAE_BATCH_SIZE=256`.
pub const ENV_PREFIX: &str = "DIFFSAE_";

#[derive(Debug, Parser)]
#[command(name = "diffsae", version, about = "TopK sparse autoencoders over diffusion-model activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for per-image parallelism. Results do not depend on it.
    #[arg(long, default_value_t = 1, env = "DIFFSAE_THREADS")]
    pub threads: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate planted-dictionary shards with known ground truth.
    GenPlanted(GenPlantedArgs),
    /// Train an SAE on activation shards.
    Train(TrainArgs),
    /// Scaled MSE and explained variance of a checkpoint on shards.
    Eval(EvalArgs),
    /// Dictionary recovery score of a checkpoint against a planted problem.
    RecoveryScore(RecoveryArgs),
    /// Build a concept dictionary from activations and annotation masks.
    BuildDict(BuildDictArgs),
    /// Cohesion and separability of a concept dictionary.
    DictMetrics(DictMetricsArgs),
    /// Map concepts of one dictionary to the most similar ones of another.
    MatchConcepts(MatchArgs),
    /// Predict per-noun masks from conceptual maps.
    PredictComposition(PredictArgs),
    /// Predict per-noun masks and score them against annotations.
    EvalComposition(EvalCompositionArgs),
    /// Apply an edit plan to shards offline.
    Edit(EditArgs),
    /// Serve an edit plan over the binary edit protocol.
    EditServe(EditServeArgs),
    /// Rank images by mean intensity of one concept.
    TopExamples(TopExamplesArgs),
    /// Concepts with minimal cross-image spatial variance.
    ContextFree(ContextFreeArgs),
    /// Center-of-mass quadrant scoring of external score maps.
    QuadrantEval(QuadrantEvalArgs),
    /// Aggregate externally computed edit scores.
    EditSuccess(EditSuccessArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenPlantedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub n_f: usize,
    #[arg(long, default_value_t = 4)]
    pub k_true: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f32,
    #[arg(long, default_value_t = 3125)]
    pub n_images: usize,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Images in an additional held-out shard drawn from an independent stream.
    #[arg(long, default_value_t = 0)]
    pub holdout_images: usize,
    #[arg(long, default_value_t = 1.0)]
    pub timestep: f64,
    /// Also write the ground-truth code of every vector.
    #[arg(long)]
    pub codes: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Shuffle and initialization seed; overrides `shuffle_seed` in the config.
    #[arg(long)]
    pub seed: u64,
    /// JSON training config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
    /// Held-out shards, evaluated after training.
    #[arg(long, num_args = 1..)]
    pub holdout: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RecoveryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `problem.json` written by `gen-planted`.
    #[arg(long)]
    pub problem: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelShards {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelShards,
    /// Annotation JSON lines.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ACT_THRESHOLD)]
    pub act_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DictMetricsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Embedding TSV.
    #[arg(long)]
    pub embeddings: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Source concepts to match; defaults to every embeddable one.
    #[arg(long, value_delimiter = ',')]
    pub cids: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelShards,
    #[arg(long)]
    pub dictionary: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Prompt-noun JSON lines.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIM_THRESHOLD)]
    pub sim_threshold: f64,
    /// Also write every mask as a PGM under `masks/`.
    #[arg(long)]
    pub dump_pgm: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCompositionArgs {
    #[command(flatten)]
    pub predict: PredictArgs,
    #[arg(long)]
    pub annotations: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: Common,
    /// Edit plan JSON.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[group(id = "endpoint", required = true, multiple = false, args = ["stdio", "listen"])]
pub struct EditServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub plan: PathBuf,
    /// Serve frames on stdin/stdout.
    #[arg(long)]
    pub stdio: bool,
    /// Serve TCP connections on `host:port`.
    #[arg(long)]
    pub listen: Option<String>,
    /// Exit after this many TCP connections have closed.
    #[arg(long)]
    pub max_connections: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TopExamplesArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelShards,
    #[arg(long)]
    pub cid: usize,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ContextFreeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelShards,
    #[arg(long, default_value_t = 10)]
    pub bottom_n: usize,
    /// Validation split: use images with `image_id % modulo == remainder`.
    #[arg(long, default_value_t = 1)]
    pub split_modulo: u64,
    #[arg(long, default_value_t = 0)]
    pub split_remainder: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct QuadrantEvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON lines of `{id, intended, grid | pgm}`.
    #[arg(long)]
    pub scores: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EditSuccessArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON lines of `{id, clip_before, clip_after, lpips}`.
    #[arg(long)]
    pub records: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenPlanted(_) => "gen-planted",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::RecoveryScore(_) => "recovery-score",
            Command::BuildDict(_) => "build-dict",
            Command::DictMetrics(_) => "dict-metrics",
            Command::MatchConcepts(_) => "match-concepts",
            Command::PredictComposition(_) => "predict-composition",
            Command::EvalComposition(_) => "eval-composition",
            Command::Edit(_) => "edit",
            Command::EditServe(_) => "edit-serve",
            Command::TopExamples(_) => "top-examples",
            Command::ContextFree(_) => "context-free",
            Command::QuadrantEval(_) => "quadrant-eval",
            Command::EditSuccess(_) => "edit-success",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenPlanted(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::RecoveryScore(a) => &a.common,
            Command::BuildDict(a) => &a.common,
            Command::DictMetrics(a) => &a.common,
            Command::MatchConcepts(a) => &a.common,
            Command::PredictComposition(a) => &a.common,
            Command::EvalComposition(a) => &a.predict.common,
            Command::Edit(a) => &a.common,
            Command::EditServe(a) => &a.common,
            Command::TopExamples(a) => &a.common,
            Command::ContextFree(a) => &a.common,
            Command::QuadrantEval(a) => &a.common,
            Command::EditSuccess(a) => &a.common,
        }
    }
}

/// Bookkeeping for the run manifest.
struct Ctx {
    out: PathBuf,
    threads: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    resolved: Option<Value>,
}

impl Ctx {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn inputs(&mut self, ps: &[PathBuf]) {
        self.inputs.extend_from_slice(ps);
    }

    fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        self.outputs.push(name.as_ref().to_path_buf());
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.output(name);
        write_json(&path, value)
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

pub fn execute(cli: Cli) -> i32 {
    let common = cli.command.common().clone();
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: cannot create {}: {e}", common.out.display());
        return 3;
    }
    let started = Instant::now();
    let mut ctx = Ctx {
        out: common.out.clone(),
        threads: common.threads.max(1),
        inputs: Vec::new(),
        outputs: Vec::new(),
        resolved: None,
    };
    let result = dispatch(&cli.command, &mut ctx);
    let (exit_code, error) = match &result {
        Ok(()) => (0, None),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    let mut config = json!({ "args": &cli.command });
    if let Some(r) = ctx.resolved.take() {
        config["resolved"] = r;
    }
    let inputs = ctx
        .inputs
        .iter()
        .filter(|p| p.is_file())
        .cloned()
        .collect::<Vec<_>>();
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config,
        inputs: digest_files(&inputs).unwrap_or_default(),
        outputs: ctx.outputs.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        exit_code,
        error: error.clone(),
    };
    if let Err(e) = write_json(&common.out.join(RUN_MANIFEST_FILE), &manifest) {
        eprintln!("error: writing run manifest: {e}");
    }
    if let Some(e) = error {
        eprintln!("error: {e}");
    }
    exit_code
}

fn dispatch(cmd: &Command, ctx: &mut Ctx) -> Result<()> {
    match cmd {
        Command::GenPlanted(a) => gen_planted(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Eval(a) => {
            ctx.input(&a.checkpoint);
            ctx.inputs(&a.shards);
            let model = load_model(&a.checkpoint)?;
            let report = evaluate(&model, &a.shards, ctx.threads)?;
            ctx.write_json("eval_report.json", &report)
        }
        Command::RecoveryScore(a) => {
            ctx.input(&a.checkpoint);
            ctx.input(&a.problem);
            let model = load_model(&a.checkpoint)?;
            let problem: PlantedProblem = read_json(&a.problem)?;
            if problem.d != model.d() {
                return Err(Error::config(format!("problem d = {}, model d = {}", problem.d, model.d())));
            }
            let score = dictionary_recovery_score(&model, &problem)?;
            ctx.write_json("recovery.json", &json!({ "score": score, "n_atoms": problem.n_f }))
        }
        Command::BuildDict(a) => {
            ctx.input(&a.input.checkpoint);
            ctx.inputs(&a.input.shards);
            ctx.input(&a.annotations);
            let model = load_model(&a.input.checkpoint)?;
            let annotations = read_annotations(&a.annotations)?;
            let dict = pipeline::build_dictionary(
                &model,
                &a.input.shards,
                &annotations,
                a.act_threshold,
                a.iou_threshold,
                ctx.threads,
            )?;
            ctx.write_json("dictionary.json", &dict)
        }
        Command::DictMetrics(a) => dict_metrics(a, ctx),
        Command::MatchConcepts(a) => match_cmd(a, ctx),
        Command::PredictComposition(a) => predict_cmd(a, ctx),
        Command::EvalComposition(a) => eval_composition_cmd(a, ctx),
        Command::Edit(a) => edit_cmd(a, ctx),
        Command::EditServe(a) => edit_serve_cmd(a, ctx),
        Command::TopExamples(a) => {
            ctx.input(&a.input.checkpoint);
            ctx.inputs(&a.input.shards);
            let model = load_model(&a.input.checkpoint)?;
            let examples = pipeline::top_examples(&model, &a.input.shards, a.cid, a.top_n, ctx.threads)?;
            ctx.write_json(
                "top_examples.json",
                &json!({ "cid": a.cid, "top_n": a.top_n, "examples": examples }),
            )
        }
        Command::ContextFree(a) => {
            ctx.input(&a.input.checkpoint);
            ctx.inputs(&a.input.shards);
            let split = Split::new(a.split_modulo, a.split_remainder)?;
            let model = load_model(&a.input.checkpoint)?;
            let (concepts, n_images) =
                pipeline::context_free_concepts(&model, &a.input.shards, a.bottom_n, split, ctx.threads)?;
            ctx.write_json(
                "context_free.json",
                &json!({ "split": split, "n_images": n_images, "concepts": concepts }),
            )
        }
        Command::QuadrantEval(a) => quadrant_cmd(a, ctx),
        Command::EditSuccess(a) => {
            ctx.input(&a.records);
            let records = read_edit_records(&a.records)?;
            let summary = edit_success_table(&records)?;
            ctx.write_json(
                "edit_success.json",
                &json!({
                    "summary": summary,
                    "reference_context": {
                        "description": "published middle-stage global edits on a real text-to-image model; not reproducible here",
                        "delta": 0.021,
                        "success_rate": 0.93
                    }
                }),
            )
        }
    }
}

fn gen_planted(a: &GenPlantedArgs, ctx: &mut Ctx) -> Result<()> {
    let problem = PlantedProblem::random(a.d, a.n_f, a.k_true, a.sigma, a.seed).map_err(|e| Error::config(e.to_string()))?;
    if a.n_images == 0 || a.height * a.width == 0 {
        return Err(Error::config("need at least one image and one location"));
    }
    ctx.write_json("problem.json", &problem)?;
    let mut shards = vec![("planted", a.n_images, 1u64, 0u64)];
    if a.holdout_images > 0 {
        shards.push(("holdout", a.holdout_images, 2, a.n_images as u64));
    }
    for (name, n, stream, first_id) in shards {
        let (records, sample) = planted_records(&problem, n, a.height, a.width, first_id, stream)?;
        let header = ShardHeader::new(
            a.d as u32,
            a.height as u32,
            a.width as u32,
            n as u64,
            planted_meta(a.timestep),
        );
        let path = ctx.output(format!("{name}.{SHARD_EXTENSION}"));
        write_shard_file(&path, &header, &records)?;
        if a.codes {
            #[derive(Serialize)]
            struct CodeLine<'a> {
                vector: usize,
                indices: &'a [usize],
                values: &'a [f32],
            }
            let lines: Vec<CodeLine> = sample
                .codes
                .iter()
                .enumerate()
                .map(|(vector, c)| CodeLine {
                    vector,
                    indices: &c.indices,
                    values: &c.values,
                })
                .collect();
            let path = ctx.output(format!("{name}_codes.jsonl"));
            write_jsonl(&path, &lines)?;
        }
    }
    Ok(())
}

/// Overrides keys of a flat JSON config from `PREFIX<KEY>` variables; values
/// parse as JSON when they can and as strings otherwise.
pub fn apply_env_overrides<T: Serialize + DeserializeOwned>(
    config: &T,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<T> {
    let mut value = serde_json::to_value(config)?;
    let Some(obj) = value.as_object_mut() else {
        return Err(Error::config("config is not a JSON object"));
    };
    let vars: BTreeMap<String, String> = vars.into_iter().collect();
    for (key, slot) in obj.iter_mut() {
        if let Some(raw) = vars.get(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("environment override: {e}")))
}

pub fn resolve_train_config(
    file: Option<&Path>,
    seed: u64,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<TrainConfig> {
    let base = match file {
        Some(p) => read_json::<TrainConfig>(p).map_err(|e| Error::config(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let mut config = apply_env_overrides(&base, vars)?;
    config.shuffle_seed = seed;
    config.validate()?;
    Ok(config)
}

fn train_cmd(a: &TrainArgs, ctx: &mut Ctx) -> Result<()> {
    if let Some(c) = &a.config {
        ctx.input(c);
    }
    ctx.inputs(&a.shards);
    ctx.inputs(&a.holdout);
    let config = resolve_train_config(a.config.as_deref(), a.seed, std::env::vars())?;
    ctx.resolved = Some(serde_json::to_value(&config)?);
    let mut next_log = 0u64;
    let outcome = train_with(&config, &a.shards, &a.holdout, &ctx.out, |s| {
        if s.step >= next_log || s.step == s.steps_total {
            log::info!(
                "step {}/{} epoch {} loss {:.6} rec {:.6} aux {:.6} dead {:.3}",
                s.step,
                s.steps_total,
                s.epoch,
                s.loss,
                s.rec,
                s.aux,
                s.dead_fraction
            );
            next_log = s.step + (s.steps_total / 100).max(1);
        }
    })?;
    ctx.outputs.push("manifest.json".into());
    ctx.outputs.push(outcome.manifest.final_checkpoint.clone());
    ctx.outputs.extend(outcome.manifest.checkpoints.iter().cloned());
    Ok(())
}

fn dict_metrics(a: &DictMetricsArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.dictionary);
    ctx.input(&a.embeddings);
    let dict: ConceptDictionary = read_json(&a.dictionary)?;
    let table = read_embeddings(&a.embeddings)?;
    let sep = separability(&dict, &table);
    let report = json!({
        "n_concepts": dict.concepts.len(),
        "n_embeddable": concept_centroids(&dict, &table).len(),
        "cohesion": cohesion(&dict, &table),
        "cohesion_per_concept": cohesion_per_concept(&dict, &table),
        "separability": sep.as_ref().ok(),
        "separability_note": sep.as_ref().err().map(|e| e.to_string()),
        "reference_context": {
            "description": "published cohesion on real diffusion activations; plausibility band only",
            "cohesion_band": [0.588, 0.664]
        }
    });
    ctx.write_json("dict_metrics.json", &report)
}

fn match_cmd(a: &MatchArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.source);
    ctx.input(&a.target);
    ctx.input(&a.embeddings);
    let source: ConceptDictionary = read_json(&a.source)?;
    let target: ConceptDictionary = read_json(&a.target)?;
    let table = read_embeddings(&a.embeddings)?;
    let cids: Vec<usize> = if a.cids.is_empty() {
        concept_centroids(&source, &table).into_keys().collect()
    } else {
        a.cids.clone()
    };
    let matches = match_concepts(&source, &target, &table, &cids)?;
    let src = concept_centroids(&source, &table);
    let tgt = concept_centroids(&target, &table);
    let rows: BTreeMap<usize, Value> = matches
        .iter()
        .map(|(&s, &t)| (s, json!({ "target": t, "similarity": cosine(&src[&s], &tgt[&t]) })))
        .collect();
    ctx.write_json("matches.json", &json!({ "matches": rows }))
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_id: u64,
    noun: String,
    mask: RleMask,
}

fn mask_file_name(image_id: u64, noun: &str, suffix: &str) -> String {
    let safe: String = noun
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("masks/{image_id}_{safe}{suffix}.pgm")
}

struct Loaded {
    model: diffsae_core::SaeModel<f32>,
    dict: ConceptDictionary,
    table: diffsae_core::concepts::EmbeddingTable,
    prompts: BTreeMap<u64, Vec<String>>,
}

fn load_prediction_inputs(a: &PredictArgs, ctx: &mut Ctx) -> Result<Loaded> {
    ctx.input(&a.input.checkpoint);
    ctx.inputs(&a.input.shards);
    ctx.input(&a.dictionary);
    ctx.input(&a.embeddings);
    ctx.input(&a.prompts);
    if !(-1.0..=1.0).contains(&a.sim_threshold) {
        return Err(Error::config("sim_threshold must lie in [-1, 1]"));
    }
    Ok(Loaded {
        model: load_model(&a.input.checkpoint)?,
        dict: read_json(&a.dictionary)?,
        table: read_embeddings(&a.embeddings)?,
        prompts: read_prompt_nouns(&a.prompts)?,
    })
}

fn predict_cmd(a: &PredictArgs, ctx: &mut Ctx) -> Result<()> {
    let l = load_prediction_inputs(a, ctx)?;
    let preds = pipeline::predict_composition(
        &l.model,
        &a.input.shards,
        &l.dict,
        &l.table,
        &l.prompts,
        a.sim_threshold,
        ctx.threads,
    )?;
    if a.dump_pgm {
        std::fs::create_dir_all(ctx.out.join("masks")).map_err(Error::at(ctx.out.join("masks")))?;
        for p in &preds.items {
            let path = ctx.output(mask_file_name(p.image_id, &p.noun, ""));
            write_mask_pgm(&path, &p.mask)?;
        }
    }
    let lines: Vec<PredictionLine> = preds
        .items
        .iter()
        .map(|p| PredictionLine {
            image_id: p.image_id,
            noun: p.noun.clone(),
            mask: RleMask::from_mask(&p.mask),
        })
        .collect();
    ctx.write_json(
        "predictions.json",
        &json!({
            "sim_threshold": a.sim_threshold,
            "skipped_no_embedding": preds.skipped_no_embedding,
            "predictions": lines,
        }),
    )
}

fn eval_composition_cmd(a: &EvalCompositionArgs, ctx: &mut Ctx) -> Result<()> {
    let p = &a.predict;
    let l = load_prediction_inputs(p, ctx)?;
    ctx.input(&a.annotations);
    let annotations = read_annotations(&a.annotations)?;
    let report = pipeline::evaluate_composition(
        &l.model,
        &p.input.shards,
        &l.dict,
        &l.table,
        &annotations,
        &l.prompts,
        p.sim_threshold,
        ctx.threads,
    )?;
    if p.dump_pgm {
        std::fs::create_dir_all(ctx.out.join("masks")).map_err(Error::at(ctx.out.join("masks")))?;
        for pair in &report.pairs {
            let path = ctx.output(mask_file_name(pair.image_id, &pair.noun, "_pred"));
            write_mask_pgm(&path, &pair.predicted)?;
            let path = ctx.output(mask_file_name(pair.image_id, &pair.noun, "_truth"));
            write_mask_pgm(&path, &pair.truth)?;
        }
    }
    let pairs: Vec<Value> = report
        .pairs
        .iter()
        .map(|pr| {
            json!({
                "image_id": pr.image_id,
                "noun": pr.noun,
                "iou": pr.iou,
                "predicted": RleMask::from_mask(&pr.predicted),
                "truth": RleMask::from_mask(&pr.truth),
            })
        })
        .collect();
    ctx.write_json(
        "composition_report.json",
        &json!({
            "sim_threshold": report.sim_threshold,
            "mean_iou": report.mean_iou,
            "n_pairs": report.pairs.len(),
            "skipped_no_embedding": report.skipped_no_embedding,
            "skipped_not_detected": report.skipped_not_detected,
            "reference_context": {
                "description": "published mean IoU from mid-block conditional features at t = 1.0 on a real text-to-image model; not reproducible here",
                "mean_iou": 0.26
            },
            "pairs": pairs,
        }),
    )
}

fn edit_cmd(a: &EditArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.plan);
    ctx.inputs(&a.shards);
    let plan = load_plan(&a.plan)?;
    let mut names = std::collections::BTreeSet::new();
    let dir = ctx.out.join("edited");
    std::fs::create_dir_all(&dir).map_err(Error::at(&dir))?;
    let mut per_shard = Vec::new();
    for shard in &a.shards {
        let name = shard
            .file_name()
            .ok_or_else(|| Error::config(format!("{} has no file name", shard.display())))?;
        if !names.insert(name.to_os_string()) {
            return Err(Error::config(format!("duplicate shard file name {name:?}")));
        }
        let out = ctx.output(Path::new("edited").join(name));
        let stats = pipeline::edit_shard(&plan.model, &plan.edit, plan.window, shard, &out, ctx.threads)?;
        per_shard.push(json!({ "shard": shard, "output": Path::new("edited").join(name), "stats": stats }));
    }
    ctx.resolved = Some(json!({ "cids": plan.edit.cids(), "beta": plan.edit.beta(), "mode": plan.edit.mode() }));
    ctx.write_json("edit_summary.json", &json!({ "shards": per_shard }))
}

fn edit_serve_cmd(a: &EditServeArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.plan);
    let plan = load_plan(&a.plan)?;
    ctx.resolved = Some(json!({ "cids": plan.edit.cids(), "beta": plan.edit.beta(), "mode": plan.edit.mode() }));
    let server = Arc::new(EditServer::from_plan(plan));
    let stats = if a.stdio {
        server.serve(std::io::stdin().lock(), std::io::stdout().lock())?
    } else {
        let addr = a.listen.as_deref().unwrap_or_default();
        let listener = TcpListener::bind(addr).map_err(|e| Error::config(format!("cannot listen on {addr}: {e}")))?;
        log::info!("listening on {}", listener.local_addr()?);
        serve_tcp(listener, server, a.max_connections)?
    };
    ctx.write_json("serve_stats.json", &stats)
}

fn quadrant_cmd(a: &QuadrantEvalArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.scores);
    let entries: Vec<ScoreMapEntry> = read_jsonl(&a.scores)?;
    if entries.is_empty() {
        return Err(Error::format("no score maps"));
    }
    let base = a.scores.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut results = Vec::with_capacity(entries.len());
    let mut wins = 0usize;
    for e in &entries {
        if let Some(p) = &e.pgm {
            ctx.input(&base.join(p));
        }
        let map = e.load(&base)?;
        let outcome = quadrant_success(&map.values, map.h, map.w, e.intended)
            .map_err(|err| Error::format(format!("score map {}: {err}", e.id)))?;
        wins += usize::from(outcome.success);
        results.push(json!({
            "id": e.id,
            "intended": e.intended,
            "classified": outcome.classified,
            "center": [outcome.center.0, outcome.center.1],
            "success": outcome.success,
        }));
    }
    let per_quadrant: BTreeMap<&str, Value> = Quadrant::ALL
        .iter()
        .map(|q| {
            let mine: Vec<bool> = entries
                .iter()
                .zip(&results)
                .filter(|(e, _)| e.intended == *q)
                .map(|(_, r)| r["success"].as_bool().unwrap_or(false))
                .collect();
            let rate = if mine.is_empty() {
                Value::Null
            } else {
                json!(mine.iter().filter(|s| **s).count() as f64 / mine.len() as f64)
            };
            (q.name(), json!({ "n": mine.len(), "success_rate": rate }))
        })
        .collect();
    ctx.write_json(
        "quadrant_report.json",
        &json!({
            "n": entries.len(),
            "success_rate": wins as f64 / entries.len() as f64,
            "random_baseline": RANDOM_QUADRANT_BASELINE,
            "per_quadrant": per_quadrant,
            "results": results,
        }),
    )
}
