//! Experiment orchestration: configuration files, dataset generation on
//! disk, the train / adapter-tune / zero-shot / transfer commands, and the
//! in-memory protocol drivers they share.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{
    generate, load_jsonl, save_jsonl, DataError, DatasetCollection, DatasetSpec, Example, Vocab,
};
use crate::eval::{evaluate, ChunkingConfig, ScoreReport};
use crate::model::{Expert, ParameterSet};
use crate::model::ModelConfig;
use crate::train::{
    adapter_tune, prepare_dataset, train_made_joint, train_multi, MetricsRow, PreparedDataset,
    SamplingMode, TrainConfig, TrainError, TrainOutcome, TrainState,
};
use crate::transfer::{
    average_uniform, ensemble_predict, transfer_post_avg, transfer_pre_avg, transfer_tune_expert,
    TransferConfig, TransferReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl From<crate::tensor::TensorError> for PipelineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        PipelineError::Train(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub datasets: DatasetCollection,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Target examples reserved for the transfer test split.
    #[serde(default = "default_test_reserve")]
    pub test_reserve: usize,
    /// Per-dataset EM+F1 reference for dynamic sampling, keyed by name.
    #[serde(default)]
    pub best_single: BTreeMap<String, f64>,
}

fn default_test_reserve() -> usize {
    400
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(TrainError::from)?;
        self.train.validate()?;
        self.transfer.validate()?;
        self.datasets.validate()?;
        if self.datasets.sources.is_empty() {
            return Err(PipelineError::Config("no source datasets".into()));
        }
        Ok(())
    }

    /// Echo the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| io_err(&self.out_dir, e))?;
        let path = self.out_dir.join("config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.out_dir.join("metrics").join(format!("{name}.csv"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out_dir.join("reports").join(format!("{name}.json"))
    }
}

// ---------------------------------------------------------------------------
// Dataset generation and loading

/// Distinct seeds per dataset and split, stable across runs.
fn split_seed(base: u64, name: &str, split: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes().chain(split.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    base.wrapping_add(h)
}

/// Write train/dev JSONL for every dataset, plus a test reserve for targets.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut written = Vec::new();
    let mut write = |spec: &DatasetSpec, split: &str, n: usize| -> Result<()> {
        let examples = generate(spec, n, split_seed(cfg.seed, &spec.name, split))?;
        let path = dir.join(format!("{}.{split}.jsonl", spec.name));
        save_jsonl(&path, &examples)?;
        written.push(path);
        Ok(())
    };
    for spec in &cfg.datasets.sources {
        write(spec, "train", spec.train_size)?;
        write(spec, "dev", spec.dev_size)?;
    }
    for spec in &cfg.datasets.targets {
        write(spec, "train", spec.train_size)?;
        write(spec, "dev", spec.dev_size)?;
        write(spec, "test", cfg.test_reserve)?;
    }
    Ok(written)
}

pub struct LoadedDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    /// Reserved test split; targets only.
    pub test: Vec<Example>,
}

pub struct Corpus {
    pub sources: Vec<LoadedDataset>,
    pub targets: Vec<LoadedDataset>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn source(&self, name: &str) -> Result<&LoadedDataset> {
        self.sources
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown source dataset {name}")))
    }

    pub fn target(&self, name: &str) -> Result<&LoadedDataset> {
        self.targets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown target dataset {name}")))
    }
}

fn load_split(dir: &Path, name: &str, split: &str) -> Result<Vec<Example>> {
    let path = dir.join(format!("{name}.{split}.jsonl"));
    Ok(load_jsonl(&path)?.examples)
}

/// Load every dataset file referenced by the config and build the shared
/// vocabulary over all of them (deterministic: sorted token set).
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = cfg.data_dir();
    let mut sources = Vec::new();
    for spec in &cfg.datasets.sources {
        sources.push(LoadedDataset {
            name: spec.name.clone(),
            train: load_split(&dir, &spec.name, "train")?,
            dev: load_split(&dir, &spec.name, "dev")?,
            test: Vec::new(),
        });
    }
    let mut targets = Vec::new();
    for spec in &cfg.datasets.targets {
        targets.push(LoadedDataset {
            name: spec.name.clone(),
            train: load_split(&dir, &spec.name, "train")?,
            dev: load_split(&dir, &spec.name, "dev")?,
            test: load_split(&dir, &spec.name, "test")?,
        });
    }
    let vocab = Vocab::build(
        sources
            .iter()
            .chain(&targets)
            .flat_map(|d| d.train.iter().chain(&d.dev).chain(&d.test)),
    );
    if vocab.len() > cfg.model.vocab_size {
        return Err(PipelineError::Config(format!(
            "corpus vocabulary ({} tokens) exceeds model vocab_size {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(Corpus {
        sources,
        targets,
        vocab,
    })
}

/// Generate the corpus in memory with the same seeds as `cmd_gen_data`,
/// bypassing the JSONL round trip.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    cfg.validate()?;
    let gen = |spec: &DatasetSpec, split: &str, n: usize| {
        generate(spec, n, split_seed(cfg.seed, &spec.name, split))
    };
    let mut sources = Vec::new();
    for spec in &cfg.datasets.sources {
        sources.push(LoadedDataset {
            name: spec.name.clone(),
            train: gen(spec, "train", spec.train_size)?,
            dev: gen(spec, "dev", spec.dev_size)?,
            test: Vec::new(),
        });
    }
    let mut targets = Vec::new();
    for spec in &cfg.datasets.targets {
        targets.push(LoadedDataset {
            name: spec.name.clone(),
            train: gen(spec, "train", spec.train_size)?,
            dev: gen(spec, "dev", spec.dev_size)?,
            test: gen(spec, "test", cfg.test_reserve)?,
        });
    }
    let vocab = Vocab::build(
        sources
            .iter()
            .chain(&targets)
            .flat_map(|d| d.train.iter().chain(&d.dev).chain(&d.test)),
    );
    if vocab.len() > cfg.model.vocab_size {
        return Err(PipelineError::Config(format!(
            "corpus vocabulary ({} tokens) exceeds model vocab_size {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(Corpus {
        sources,
        targets,
        vocab,
    })
}

// ---------------------------------------------------------------------------
// Training commands

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain fine-tuning on one dataset (shared head, no routing).
    Single(String),
    /// Multi-dataset fine-tuning with uniform sampling.
    Multi,
    /// Multi-dataset fine-tuning with dynamic sampling.
    MultiDynamic,
    /// MADE joint phase: per-dataset adapters and heads, shared backbone.
    MadeJoint,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "multi" => Ok(TrainMode::Multi),
            "multi-dynamic" => Ok(TrainMode::MultiDynamic),
            "made-joint" => Ok(TrainMode::MadeJoint),
            other => match other.strip_prefix("single:") {
                Some(name) if !name.is_empty() => Ok(TrainMode::Single(name.to_string())),
                _ => Err(PipelineError::Config(format!(
                    "unknown train mode {other:?} (expected single:<dataset>, multi, multi-dynamic, made-joint)"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            TrainMode::Single(name) => format!("single-{name}"),
            TrainMode::Multi => "multi".into(),
            TrainMode::MultiDynamic => "multi-dynamic".into(),
            TrainMode::MadeJoint => "made-joint".into(),
        }
    }
}

/// The shared-expert id used by single/multi fine-tuning.
pub const SHARED_EXPERT: &str = "shared";

fn prepare_all(
    datasets: &[&LoadedDataset],
    vocab: &Vocab,
    cfg: &ExperimentConfig,
) -> Result<Vec<PreparedDataset>> {
    datasets
        .iter()
        .map(|d| {
            prepare_dataset(
                &d.name,
                &d.train,
                &d.dev,
                vocab,
                cfg.model.max_positions,
                &cfg.train,
            )
            .map_err(PipelineError::from)
        })
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut out = String::from("step,dataset,em,f1,loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.dataset, r.dev_em, r.dev_f1, r.train_loss
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    set: &ParameterSet,
    vocab: &Vocab,
    state: Option<&TrainState>,
    extra: &[(&str, String)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut meta = BTreeMap::new();
    meta.insert(
        "vocab".to_string(),
        serde_json::to_string(vocab.tokens()).expect("string list serializes"),
    );
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    let mut ck = Checkpoint::from_set(set, meta);
    if let Some(state) = state {
        ck.attach_train_state(state)?;
    }
    ck.save(path)?;
    Ok(())
}

fn checkpoint_vocab(ck: &Checkpoint) -> Result<Vocab> {
    let tokens = ck
        .metadata
        .get("vocab")
        .ok_or_else(|| PipelineError::Config("checkpoint has no vocabulary metadata".into()))?;
    let tokens: Vec<String> = serde_json::from_str(tokens)
        .map_err(|e| PipelineError::Config(format!("bad vocabulary metadata: {e}")))?;
    Ok(Vocab::from_tokens(tokens)?)
}

pub struct TrainArtifacts {
    pub set: ParameterSet,
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// The train command: runs one regime over the config's source datasets and
/// writes the best checkpoint plus a metrics CSV.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    mode: &TrainMode,
    resume_from: Option<&Path>,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let label = mode.label();
    let sources: Vec<&LoadedDataset> = match mode {
        TrainMode::Single(name) => vec![corpus.source(name)?],
        _ => corpus.sources.iter().collect(),
    };
    let prepared = prepare_all(&sources, &corpus.vocab, cfg)?;

    let mut tcfg = cfg.train.clone();
    tcfg.sampling = if *mode == TrainMode::MultiDynamic {
        SamplingMode::Dynamic
    } else {
        SamplingMode::Uniform
    };

    let (mut set, resume) = match resume_from {
        Some(path) => {
            let ck = Checkpoint::load_expecting(path, &cfg.model)?;
            let state = ck.train_state()?.ok_or_else(|| {
                PipelineError::Config("checkpoint holds no training state to resume".into())
            })?;
            (ck.to_parameter_set()?, Some(state))
        }
        None => {
            let ids: Vec<String> = match mode {
                TrainMode::MadeJoint => sources.iter().map(|d| d.name.clone()).collect(),
                _ => vec![SHARED_EXPERT.to_string()],
            };
            let with_adapters = *mode == TrainMode::MadeJoint;
            (
                ParameterSet::init(cfg.model.clone(), &ids, with_adapters, cfg.seed)?,
                None,
            )
        }
    };

    let best_single: Option<Vec<f64>> = if tcfg.sampling == SamplingMode::Dynamic
        && !cfg.best_single.is_empty()
    {
        let mut v = Vec::new();
        for d in &sources {
            v.push(*cfg.best_single.get(&d.name).ok_or_else(|| {
                PipelineError::Config(format!("best_single missing dataset {}", d.name))
            })?);
        }
        Some(v)
    } else {
        None
    };

    let outcome = match mode {
        TrainMode::MadeJoint => train_made_joint(&mut set, &prepared, &corpus.vocab, &tcfg, resume)?,
        _ => train_multi(
            &mut set,
            SHARED_EXPERT,
            &prepared,
            &corpus.vocab,
            &tcfg,
            best_single.as_deref(),
            resume,
        )?,
    };

    let metrics = cfg.metrics_path(&label);
    write_metrics(&metrics, &outcome.metrics)?;
    let checkpoint = cfg.checkpoint_path(&label);
    write_checkpoint(
        &checkpoint,
        &outcome.best,
        &corpus.vocab,
        Some(&outcome.state),
        &[("mode", label.clone())],
    )?;
    Ok(TrainArtifacts {
        set: outcome.best.clone(),
        outcome,
        checkpoint,
        metrics,
    })
}

/// The adapter-tune command: freeze the backbone of an existing checkpoint
/// and refine one dataset's expert.
pub fn cmd_adapter_tune(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    checkpoint: &Path,
    dataset: &str,
) -> Result<TrainArtifacts> {
    let ck = Checkpoint::load_expecting(checkpoint, &cfg.model)?;
    let vocab = checkpoint_vocab(&ck)?;
    let mut set = ck.to_parameter_set()?;
    set.expert(dataset).map_err(TrainError::from)?;
    let src = corpus.source(dataset)?;
    let prepared = prepare_dataset(
        dataset,
        &src.train,
        &src.dev,
        &vocab,
        cfg.model.max_positions,
        &cfg.train,
    )?;
    let outcome = adapter_tune(&mut set, dataset, &prepared, &vocab, &cfg.train, None)?;
    let label = format!("adapter-{dataset}");
    let metrics = cfg.metrics_path(&label);
    write_metrics(&metrics, &outcome.metrics)?;
    let out_path = cfg.checkpoint_path(&label);
    write_checkpoint(
        &out_path,
        &outcome.best,
        &vocab,
        None,
        &[("mode", label.clone()), ("tuned_dataset", dataset.into())],
    )?;
    Ok(TrainArtifacts {
        set: outcome.best.clone(),
        outcome,
        checkpoint: out_path,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Zero-shot evaluation

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ZeroShotMethod {
    /// Uniform parameter average of all experts, one forward pass.
    Avg,
    /// Probability-space ensemble over all experts.
    Ensemble,
    /// One named expert.
    Expert(String),
    /// Every expert crossed with every target, emitted as a CSV matrix.
    Grid,
}

impl ZeroShotMethod {
    pub fn parse(s: &str) -> Result<ZeroShotMethod> {
        match s {
            "avg" => Ok(ZeroShotMethod::Avg),
            "ensemble" => Ok(ZeroShotMethod::Ensemble),
            "grid" => Ok(ZeroShotMethod::Grid),
            other => match other.strip_prefix("expert:") {
                Some(id) if !id.is_empty() => Ok(ZeroShotMethod::Expert(id.to_string())),
                _ => Err(PipelineError::Config(format!(
                    "unknown zero-shot method {other:?} (expected avg, ensemble, grid, expert:<id>)"
                ))),
            },
        }
    }
}

/// Evaluate the uniform average of a set's experts on some examples.
pub fn zero_shot_avg(
    set: &ParameterSet,
    examples: &[Example],
    vocab: &Vocab,
    chunking: ChunkingConfig,
) -> Result<ScoreReport> {
    let ids = set.dataset_ids();
    let experts: Vec<&Expert> = ids.iter().map(|id| &set.experts[id]).collect();
    let avg = average_uniform(&experts)?;
    Ok(evaluate(set, "avg", &avg, examples, vocab, chunking).map_err(TrainError::from)?)
}

pub fn zero_shot_ensemble(
    set: &ParameterSet,
    examples: &[Example],
    vocab: &Vocab,
    chunking: ChunkingConfig,
) -> Result<ScoreReport> {
    let ids = set.dataset_ids();
    let experts: Vec<(&str, &Expert)> = ids
        .iter()
        .map(|id| (id.as_str(), &set.experts[id]))
        .collect();
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let pred = ensemble_predict(set, &experts, ex, vocab, chunking)?;
        pairs.push((ex.id.clone(), pred.answer, ex.answers.clone()));
    }
    Ok(crate::eval::score_predictions(&pairs))
}

pub fn zero_shot_expert(
    set: &ParameterSet,
    id: &str,
    examples: &[Example],
    vocab: &Vocab,
    chunking: ChunkingConfig,
) -> Result<ScoreReport> {
    let expert = set.expert(id).map_err(TrainError::from)?;
    Ok(evaluate(set, id, expert, examples, vocab, chunking).map_err(TrainError::from)?)
}

/// The zero-shot command. For `Grid` the report JSON holds the expert×target
/// F1 matrix and a CSV matrix is written next to it.
pub fn cmd_zero_shot(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    checkpoint: &Path,
    target: Option<&str>,
    method: &ZeroShotMethod,
) -> Result<PathBuf> {
    let ck = Checkpoint::load_expecting(checkpoint, &cfg.model)?;
    let vocab = checkpoint_vocab(&ck)?;
    let set = ck.to_parameter_set()?;
    let chunking = cfg.train.chunking();

    if *method == ZeroShotMethod::Grid {
        let ids = set.dataset_ids();
        let mut csv = String::from("expert");
        for t in &corpus.targets {
            csv.push_str(&format!(",{}", t.name));
        }
        csv.push('\n');
        let mut matrix = BTreeMap::new();
        for id in &ids {
            csv.push_str(id);
            let mut row = BTreeMap::new();
            for t in &corpus.targets {
                let r = zero_shot_expert(&set, id, &t.dev, &vocab, chunking)?;
                csv.push_str(&format!(",{}", r.f1));
                row.insert(t.name.clone(), r.f1);
            }
            csv.push('\n');
            matrix.insert(id.clone(), row);
        }
        let csv_path = cfg.report_path("zero-shot-grid").with_extension("csv");
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
        let json_path = cfg.report_path("zero-shot-grid");
        let text = serde_json::to_string_pretty(&matrix)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
        return Ok(json_path);
    }

    let target = target
        .ok_or_else(|| PipelineError::Config("zero-shot requires a target dataset".into()))?;
    let data = corpus.target(target)?;
    let (label, report) = match method {
        ZeroShotMethod::Avg => ("avg".to_string(), zero_shot_avg(&set, &data.dev, &vocab, chunking)?),
        ZeroShotMethod::Ensemble => (
            "ensemble".to_string(),
            zero_shot_ensemble(&set, &data.dev, &vocab, chunking)?,
        ),
        ZeroShotMethod::Expert(id) => (
            format!("expert-{id}"),
            zero_shot_expert(&set, id, &data.dev, &vocab, chunking)?,
        ),
        ZeroShotMethod::Grid => unreachable!(),
    };
    let path = cfg.report_path(&format!("zero-shot-{label}-{target}"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Transfer command

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMethod {
    PreAvg,
    PostAvg,
    /// Few-shot fine-tuning of the checkpoint's shared expert (baseline).
    Finetune,
}

impl TransferMethod {
    pub fn parse(s: &str) -> Result<TransferMethod> {
        match s {
            "pre-avg" => Ok(TransferMethod::PreAvg),
            "post-avg" => Ok(TransferMethod::PostAvg),
            "finetune" => Ok(TransferMethod::Finetune),
            other => Err(PipelineError::Config(format!(
                "unknown transfer method {other:?} (expected pre-avg, post-avg, finetune)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TransferMethod::PreAvg => "pre-avg",
            TransferMethod::PostAvg => "post-avg",
            TransferMethod::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferSummary {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub per_seed: Vec<TransferReport>,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub median_f1: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample K target examples for one seed, never touching the test reserve.
pub fn sample_k(pool: &[Example], k: usize, seed: u64) -> Result<Vec<Example>> {
    if pool.len() < k {
        return Err(PipelineError::Config(format!(
            "need {k} target examples outside the test reserve, have {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    Ok(idx[..k].iter().map(|&i| pool[i].clone()).collect())
}

/// Run one transfer method for one seed on pre-sampled target examples and
/// score the result on the test reserve.
pub fn run_transfer_once(
    set: &ParameterSet,
    method: TransferMethod,
    target_name: &str,
    sampled: &[Example],
    test: &[Example],
    vocab: &Vocab,
    tcfg: &TransferConfig,
    chunking: ChunkingConfig,
) -> Result<TransferReport> {
    let ids = set.dataset_ids();
    let outcome = match method {
        TransferMethod::PreAvg => transfer_pre_avg(set, "tgt", sampled, vocab, tcfg)?,
        TransferMethod::PostAvg => transfer_post_avg(set, sampled, vocab, tcfg)?,
        TransferMethod::Finetune => {
            let init = if ids.len() == 1 {
                set.experts[&ids[0]].clone()
            } else {
                let experts: Vec<&Expert> = ids.iter().map(|id| &set.experts[id]).collect();
                average_uniform(&experts)?
            };
            transfer_tune_expert(set, "tgt", init, sampled, vocab, tcfg)?
        }
    };
    let report = evaluate(
        &outcome.set,
        "tgt",
        &outcome.expert,
        test,
        vocab,
        chunking,
    )
    .map_err(TrainError::from)?;
    let zip = |v: &[f64]| -> BTreeMap<String, f64> {
        ids.iter().cloned().zip(v.iter().copied()).collect()
    };
    Ok(TransferReport {
        method: method.label().to_string(),
        dataset: target_name.to_string(),
        k: tcfg.k,
        seed: tcfg.seed,
        alpha: outcome.alpha.as_ref().map(|a| zip(&a.alpha)),
        probe_losses: zip(&outcome.probe_losses),
        steps: outcome.steps,
        best_val_loss: outcome.best_val_loss,
        test_em: report.em,
        test_f1: report.f1,
    })
}

/// The transfer command: per-seed runs plus mean/median summary, written as a
/// report JSON.
pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    checkpoint: &Path,
    target: &str,
    k: usize,
    method: TransferMethod,
    seeds: &[u64],
) -> Result<(PathBuf, TransferSummary)> {
    if seeds.is_empty() {
        return Err(PipelineError::Config("no seeds given".into()));
    }
    let ck = Checkpoint::load_expecting(checkpoint, &cfg.model)?;
    let vocab = checkpoint_vocab(&ck)?;
    let set = ck.to_parameter_set()?;
    let data = corpus.target(target)?;
    let mut tcfg = cfg.transfer.clone();
    tcfg.k = k;

    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut scfg = tcfg.clone();
        scfg.seed = seed;
        let sampled = sample_k(&data.train, k, seed)?;
        per_seed.push(run_transfer_once(
            &set,
            method,
            target,
            &sampled,
            &data.test,
            &vocab,
            &scfg,
            cfg.train.chunking(),
        )?);
    }
    let f1s: Vec<f64> = per_seed.iter().map(|r| r.test_f1).collect();
    let ems: Vec<f64> = per_seed.iter().map(|r| r.test_em).collect();
    let summary = TransferSummary {
        method: method.label().to_string(),
        dataset: target.to_string(),
        k,
        mean_em: ems.iter().sum::<f64>() / ems.len() as f64,
        mean_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        median_f1: median(&f1s),
        per_seed,
    };
    let path = cfg.report_path(&format!("transfer-{}-{target}-k{k}", method.label()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok((path, summary))
}

// ---------------------------------------------------------------------------
// Protocol drivers (shared by the CLI pipeline and the acceptance suite)

/// Everything one seed produces for the three comparison protocols.
pub struct SeedArtifacts {
    /// MADE after the joint phase.
    pub made_joint: ParameterSet,
    /// MADE after per-dataset adapter tuning (final model).
    pub made: ParameterSet,
    /// Multi-dataset fine-tuning baseline (shared expert, no adapters).
    pub multi: ParameterSet,
    /// Per-dataset adapters trained independently on the frozen multi
    /// backbone.
    pub single: ParameterSet,
    /// Dev F1 per source dataset, joint checkpoint.
    pub joint_dev_f1: BTreeMap<String, f64>,
    /// Dev F1 per source dataset, after adapter tuning.
    pub made_dev_f1: BTreeMap<String, f64>,
    /// Dev F1 per source dataset, multi baseline (shared expert).
    pub multi_dev_f1: BTreeMap<String, f64>,
    /// Dev F1 per source dataset, single-dataset adapters.
    pub single_dev_f1: BTreeMap<String, f64>,
}

fn dev_f1_map(
    set: &ParameterSet,
    expert_for: impl Fn(&str) -> String,
    sources: &[&LoadedDataset],
    vocab: &Vocab,
    chunking: ChunkingConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for d in sources {
        let id = expert_for(&d.name);
        let expert = set.expert(&id).map_err(TrainError::from)?.clone();
        let r = evaluate(set, &id, &expert, &d.dev, vocab, chunking).map_err(TrainError::from)?;
        out.insert(d.name.clone(), r.f1);
    }
    Ok(out)
}

/// Train all three protocols for one seed: the multi-dataset baseline, MADE
/// (joint + adapter tuning), and single-dataset adapters on the frozen multi
/// backbone.
///
/// There is no pretrained encoder at this scale, so the multi-task backbone
/// plays that role: MADE's joint phase warm-starts from it (with fresh
/// adapters and heads) and the single-dataset adapters train on it frozen.
/// Starting both expert conditions from the same competent backbone keeps
/// the experts within one basin, which is what makes their parameter
/// averages meaningful to compare.
pub fn run_protocols(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let sources: Vec<&LoadedDataset> = corpus.sources.iter().collect();
    let names: Vec<String> = sources.iter().map(|d| d.name.clone()).collect();
    let prepared = prepare_all(&sources, &corpus.vocab, cfg)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let chunking = tcfg.chunking();

    // multi-dataset fine-tuning baseline: one shared expert, no adapters
    let mut multi = ParameterSet::init(cfg.model.clone(), &[SHARED_EXPERT.to_string()], false, seed)?;
    let out = train_multi(
        &mut multi,
        SHARED_EXPERT,
        &prepared,
        &corpus.vocab,
        &tcfg,
        None,
        None,
    )?;
    let multi = out.best;
    let multi_dev_f1 = dev_f1_map(
        &multi,
        |_| SHARED_EXPERT.to_string(),
        &sources,
        &corpus.vocab,
        chunking,
    )?;

    // MADE: joint phase from the warm-started backbone, then per-dataset
    // adapter tuning with theta frozen
    let mut made = ParameterSet::init(cfg.model.clone(), &names, true, seed)?;
    made.backbone = multi.backbone.clone();
    train_joint_into(&mut made, &prepared, corpus, &tcfg)?;
    let made_joint = made.clone();
    let joint_dev_f1 = dev_f1_map(&made_joint, |n| n.to_string(), &sources, &corpus.vocab, chunking)?;
    for (i, name) in names.iter().enumerate() {
        let out = adapter_tune(&mut made, name, &prepared[i], &corpus.vocab, &tcfg, None)?;
        made = out.best;
    }
    let made_dev_f1 = dev_f1_map(&made, |n| n.to_string(), &sources, &corpus.vocab, chunking)?;

    // single-dataset adapters: fresh adapters on the frozen multi backbone,
    // each trained only on its own dataset
    let mut single = ParameterSet {
        config: multi.config.clone(),
        backbone: multi.backbone.clone(),
        experts: BTreeMap::new(),
    };
    for (i, name) in names.iter().enumerate() {
        single.experts.insert(
            name.clone(),
            single.fresh_expert(true, seed.wrapping_add(1 + i as u64)),
        );
    }
    for (i, name) in names.iter().enumerate() {
        let out = adapter_tune(&mut single, name, &prepared[i], &corpus.vocab, &tcfg, None)?;
        single = out.best;
    }
    let single_dev_f1 = dev_f1_map(&single, |n| n.to_string(), &sources, &corpus.vocab, chunking)?;

    Ok(SeedArtifacts {
        made_joint,
        made,
        multi,
        single,
        joint_dev_f1,
        made_dev_f1,
        multi_dev_f1,
        single_dev_f1,
    })
}

fn train_joint_into(
    set: &mut ParameterSet,
    prepared: &[PreparedDataset],
    corpus: &Corpus,
    tcfg: &TrainConfig,
) -> Result<()> {
    let out = train_made_joint(set, prepared, &corpus.vocab, tcfg, None)?;
    *set = out.best;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(out_dir: PathBuf) -> ExperimentConfig {
        let spec = |name: &str, bias| DatasetSpec {
            name: name.into(),
            vocab_range: (0, 12),
            context_len: (4, 8),
            pairs: 2,
            position_bias: bias,
            distractor_rate: 0.0,
            indirection: 0,
            duplicate_rate: 0.0,
            train_size: 12,
            dev_size: 6,
        };
        use crate::data::PositionBias::*;
        ExperimentConfig {
            model: ModelConfig {
                num_layers: 1,
                d_model: 16,
                num_heads: 2,
                d_ff: 32,
                vocab_size: 64,
                max_positions: 24,
                adapter_dim: 4,
                layer_norm_eps: 1e-6,
            },
            train: TrainConfig {
                batch_size: 4,
                backbone_lr: 3e-3,
                adapter_lr: 1e-2,
                adam: Default::default(),
                checkpoint_interval: 10,
                patience: 2,
                max_epochs: 6,
                seed: 0,
                sampling: SamplingMode::Uniform,
                train_cap: 100,
                dev_cap: 10,
                stride: 16,
                max_answer_len: 4,
            },
            transfer: crate::transfer::TransferConfig {
                k: 4,
                max_steps: 12,
                eval_every: 4,
                patience: 2,
                batch_size: 2,
                backbone_lr: 1e-3,
                adapter_lr: 3e-3,
                freeze_backbone: true,
                seed: 0,
                adam: Default::default(),
                stride: 16,
                max_answer_len: 4,
            },
            datasets: DatasetCollection {
                sources: vec![spec("s1", Early), spec("s2", Late)],
                targets: vec![spec("t1", Uniform)],
            },
            out_dir,
            seed: 7,
            test_reserve: 6,
            best_single: BTreeMap::new(),
        }
    }

    #[test]
    fn gen_data_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().join("a"));
        let files = cmd_gen_data(&cfg).unwrap();
        assert_eq!(files.len(), 2 * 2 + 3);
        let cfg2 = tiny_config(dir.path().join("b"));
        let files2 = cmd_gen_data(&cfg2).unwrap();
        for (a, b) in files.iter().zip(&files2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
        }
        // empty source list rejected
        let mut bad = tiny_config(dir.path().join("c"));
        bad.datasets.sources.clear();
        assert!(cmd_gen_data(&bad).is_err());
    }

    #[test]
    fn corpus_from_files_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().to_path_buf());
        cmd_gen_data(&cfg).unwrap();
        let loaded = load_corpus(&cfg).unwrap();
        let built = build_corpus(&cfg).unwrap();
        assert_eq!(loaded.vocab.tokens(), built.vocab.tokens());
        for (a, b) in loaded.sources.iter().zip(&built.sources) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.dev, b.dev);
        }
        assert_eq!(loaded.targets[0].test.len(), cfg.test_reserve);
    }

    #[test]
    fn mode_and_method_parsing() {
        assert_eq!(TrainMode::parse("multi").unwrap(), TrainMode::Multi);
        assert_eq!(
            TrainMode::parse("single:s1").unwrap(),
            TrainMode::Single("s1".into())
        );
        assert!(TrainMode::parse("single:").is_err());
        assert!(TrainMode::parse("nope").is_err());
        assert_eq!(ZeroShotMethod::parse("avg").unwrap(), ZeroShotMethod::Avg);
        assert_eq!(
            ZeroShotMethod::parse("expert:s2").unwrap(),
            ZeroShotMethod::Expert("s2".into())
        );
        assert!(ZeroShotMethod::parse("expert:").is_err());
        assert_eq!(
            TransferMethod::parse("post-avg").unwrap(),
            TransferMethod::PostAvg
        );
        assert!(TransferMethod::parse("avg").is_err());
    }

    #[test]
    fn median_and_sampling() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());

        let cfg = tiny_config(PathBuf::from("unused"));
        let pool = generate(&cfg.datasets.targets[0], 10, 0).unwrap();
        let a = sample_k(&pool, 4, 1).unwrap();
        let b = sample_k(&pool, 4, 1).unwrap();
        assert_eq!(a, b);
        let c = sample_k(&pool, 4, 2).unwrap();
        assert!(a != c || a.len() == pool.len());
        assert!(sample_k(&pool, 11, 0).is_err());
    }

    #[test]
    fn train_single_writes_artifacts_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path().to_path_buf());
        let corpus = build_corpus(&cfg).unwrap();
        let mode = TrainMode::Single("s1".into());
        let art = cmd_train(&cfg, &corpus, &mode, None).unwrap();
        assert!(art.checkpoint.exists());
        let csv = fs::read_to_string(&art.metrics).unwrap();
        assert!(csv.starts_with("step,dataset,em,f1,loss\n"));
        assert!(csv.lines().count() > 1);
        // resuming from the written checkpoint picks up training state
        let resumed = cmd_train(&cfg, &corpus, &mode, Some(&art.checkpoint)).unwrap();
        assert!(resumed.outcome.state.step >= art.outcome.state.step);
    }
}
