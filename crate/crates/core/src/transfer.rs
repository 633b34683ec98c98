//! Parameter-space composition of trained experts: uniform and loss-weighted
//! averaging, probability ensembling, and the pre-/post-average few-shot
//! transfer procedures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{chunk, BatchSampler, Chunk, Example, Vocab};
use crate::eval::{chunk_scores, decode_from_scores, ChunkingConfig, Prediction};
use crate::graph::{Graph, NodeId};
use crate::model::{Expert, ModelBinding, ParamMap, ParameterSet};
use crate::tensor::{Tensor, TensorError};
use crate::train::{adamw_step, chunk_loss, AdamConfig, OptimizerState, Result, TrainError};

#[derive(Debug, Clone, Serialize)]
pub struct MixtureWeights {
    /// Aligned with lexicographic source dataset order; non-negative, sums to 1.
    pub alpha: Vec<f64>,
}

/// alpha_i = exp(-loss_i) / sum_j exp(-loss_j), stabilized.
pub fn mixture_weights(mean_losses: &[f64]) -> Result<MixtureWeights> {
    if mean_losses.is_empty() {
        return Err(TrainError::Invalid("no probe losses".into()));
    }
    if mean_losses.iter().any(|l| !l.is_finite()) {
        return Err(TrainError::Invalid("non-finite probe loss".into()));
    }
    let m = mean_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = mean_losses.iter().map(|l| (-(l - m)).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(MixtureWeights {
        alpha: exps.iter().map(|e| e / z).collect(),
    })
}

fn combine_maps(maps: &[&ParamMap], weights: &[f64]) -> Result<ParamMap> {
    let mut out = ParamMap::new();
    for (name, first) in maps[0] {
        let mut acc = Tensor::zeros(first.shape());
        for (map, &w) in maps.iter().zip(weights) {
            let t = map.get(name).ok_or_else(|| {
                TrainError::Invalid(format!("expert missing tensor {name}"))
            })?;
            if t.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch(
                    first.shape().to_vec(),
                    t.shape().to_vec(),
                )
                .into());
            }
            for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * x;
            }
        }
        out.insert(name.clone(), acc);
    }
    // reject extra tensors in later maps
    for map in maps {
        if map.len() != maps[0].len() {
            return Err(TrainError::Invalid("expert tensor sets differ".into()));
        }
    }
    Ok(out)
}

/// Convex combination of experts' adapter and head parameters.
pub fn weighted_average(experts: &[&Expert], weights: &MixtureWeights) -> Result<Expert> {
    if experts.is_empty() {
        return Err(TrainError::Invalid("no experts to average".into()));
    }
    if experts.len() != weights.alpha.len() {
        return Err(TrainError::Invalid(format!(
            "{} experts but {} weights",
            experts.len(),
            weights.alpha.len()
        )));
    }
    let heads: Vec<&ParamMap> = experts.iter().map(|e| &e.head).collect();
    let head = combine_maps(&heads, &weights.alpha)?;
    let adapter = if experts.iter().all(|e| e.adapter.is_some()) {
        let adapters: Vec<&ParamMap> =
            experts.iter().map(|e| e.adapter.as_ref().unwrap()).collect();
        Some(combine_maps(&adapters, &weights.alpha)?)
    } else if experts.iter().all(|e| e.adapter.is_none()) {
        None
    } else {
        return Err(TrainError::Invalid(
            "cannot average experts with and without adapters".into(),
        ));
    };
    Ok(Expert { adapter, head })
}

/// Elementwise arithmetic mean of experts.
pub fn average_uniform(experts: &[&Expert]) -> Result<Expert> {
    let n = experts.len();
    if n == 0 {
        return Err(TrainError::Invalid("no experts to average".into()));
    }
    weighted_average(
        experts,
        &MixtureWeights {
            alpha: vec![1.0 / n as f64; n],
        },
    )
}

/// Decode one example by averaging start/end probabilities across experts.
pub fn ensemble_predict(
    set: &ParameterSet,
    experts: &[(&str, &Expert)],
    example: &Example,
    vocab: &Vocab,
    cfg: ChunkingConfig,
) -> Result<Prediction> {
    if experts.is_empty() {
        return Err(TrainError::Invalid("no experts to ensemble".into()));
    }
    let chunks = chunk(example, vocab, set.config.max_positions, cfg.stride)?;
    let n = experts.len() as f64;
    let mut scores = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let mut s_acc = vec![0.0f64; c.token_ids.len()];
        let mut e_acc = vec![0.0f64; c.token_ids.len()];
        for (label, expert) in experts {
            let (s, e) = chunk_scores(set, label, expert, c)?;
            for i in 0..s_acc.len() {
                s_acc[i] += s[i].exp();
                e_acc[i] += e[i].exp();
            }
        }
        // back to log space for the shared decoder
        let s_lp: Vec<f64> = s_acc.iter().map(|p| (p / n).ln()).collect();
        let e_lp: Vec<f64> = e_acc.iter().map(|p| (p / n).ln()).collect();
        scores.push((s_lp, e_lp));
    }
    Ok(decode_from_scores(example, &chunks, &scores, cfg.max_answer_len)?)
}

/// Differentiable marginal NLL of a chunk under a uniform mixture of experts:
/// -log( (1/|S|) sum_i exp(-loss_i) ).
pub fn marginal_nll(
    g: &mut Graph,
    bindings: &[ModelBinding<'_>],
    chunk: &Chunk,
) -> Result<NodeId> {
    if bindings.is_empty() {
        return Err(TrainError::Invalid("no experts for marginal loss".into()));
    }
    let mut neg_losses = Vec::with_capacity(bindings.len());
    for b in bindings {
        let loss = chunk_loss(g, b, chunk)?;
        neg_losses.push(g.neg(loss)?);
    }
    let stacked = g.stack_scalars(&neg_losses)?;
    let lse = g.logsumexp(stacked)?;
    let ln_n = g.constant(Tensor::scalar((bindings.len() as f64).ln()))?;
    let neg_lse = g.neg(lse)?;
    Ok(g.add(ln_n, neg_lse)?)
}

/// Forward-only mean per-chunk NLL of one expert over a probe set.
pub fn mean_chunk_nll(
    set: &ParameterSet,
    label: &str,
    expert: &Expert,
    chunks: &[Chunk],
) -> Result<f64> {
    if chunks.is_empty() {
        return Err(TrainError::Invalid("empty probe set".into()));
    }
    let mut total = 0.0;
    for c in chunks {
        let mut g = Graph::new();
        let binding = ModelBinding::detached(set, label, expert).frozen();
        let loss = chunk_loss(&mut g, &binding, c)?;
        total += g.value(loss).item();
    }
    Ok(total / chunks.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Number of labeled target examples; half train, half validation.
    pub k: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Validation-loss checks without improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub adapter_lr: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
    #[serde(skip)]
    pub adam: AdamConfig,
    pub stride: usize,
    pub max_answer_len: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            k: 16,
            max_steps: 200,
            eval_every: 10,
            patience: 3,
            batch_size: 8,
            backbone_lr: 1e-5,
            adapter_lr: 1e-5,
            freeze_backbone: false,
            seed: 0,
            adam: AdamConfig::default(),
            stride: 128,
            max_answer_len: 10,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(TrainError::Invalid("K must be >= 2".into()));
        }
        if self.eval_every == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::Invalid(
                "eval_every/batch_size/patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a transfer run: the composed expert, the (possibly tuned)
/// parameter set it rides on, and the report ingredients.
pub struct TransferOutcome {
    pub set: ParameterSet,
    pub expert: Expert,
    pub alpha: Option<MixtureWeights>,
    pub probe_losses: Vec<f64>,
    pub steps: u64,
    pub best_val_loss: f64,
}

fn split_halves(examples: &[Example], k: usize) -> Result<(&[Example], &[Example])> {
    if examples.len() < k {
        return Err(TrainError::Invalid(format!(
            "need {k} target examples, have {}",
            examples.len()
        )));
    }
    let half = k / 2;
    Ok((&examples[..half], &examples[half..k]))
}

fn chunk_all(examples: &[Example], vocab: &Vocab, max_positions: usize, stride: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for ex in examples {
        out.extend(chunk(ex, vocab, max_positions, stride)?);
    }
    if out.is_empty() {
        return Err(TrainError::Invalid("no chunks from target examples".into()));
    }
    Ok(out)
}

fn snapshot(set: &ParameterSet, label: &str) -> (ParamMap, Option<Expert>) {
    (set.backbone.clone(), set.experts.get(label).cloned())
}

/// Fine-tune the expert stored under `label` (and the backbone, unless
/// frozen) on the train chunks, early-stopping on validation loss.
fn few_shot_tune(
    set: &mut ParameterSet,
    label: &str,
    train_chunks: &[Chunk],
    val_chunks: &[Chunk],
    cfg: &TransferConfig,
) -> Result<(u64, f64)> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(vec![train_chunks.len()], cfg.seed)?;
    let mut opt = OptimizerState::new();
    let lr_for = |path: &str| {
        if path.starts_with("backbone/") {
            cfg.backbone_lr
        } else {
            cfg.adapter_lr
        }
    };
    let val_loss = |set: &ParameterSet| -> Result<f64> {
        let expert = set.expert(label)?;
        mean_chunk_nll(set, label, expert, val_chunks)
    };
    let mut best = val_loss(set)?;
    let mut best_state = snapshot(set, label);
    let mut stale = 0usize;
    let mut step = 0u64;
    while step < cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(batch.len());
        for (_, ci) in batch {
            let expert = set.expert(label)?;
            let mut binding = ModelBinding::detached(set, label, expert);
            binding.freeze_backbone = cfg.freeze_backbone;
            losses.push(chunk_loss(&mut g, &binding, &train_chunks[ci])?);
        }
        let stacked = g.stack_scalars(&losses)?;
        let loss = g.mean(stacked)?;
        let grads = g.backward(loss)?;
        adamw_step(&mut opt, set, &grads, &lr_for, &cfg.adam)?;
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val_loss(set)?;
            if v < best {
                best = v;
                best_state = snapshot(set, label);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (backbone, expert) = best_state;
    set.backbone = backbone;
    if let Some(e) = expert {
        set.experts.insert(label.to_string(), e);
    }
    Ok((step, best))
}

/// Per-expert mean zero-shot NLL over probe chunks, in lexicographic
/// dataset-id order.
pub fn probe_losses(set: &ParameterSet, chunks: &[Chunk]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for id in set.dataset_ids() {
        out.push(mean_chunk_nll(set, &id, set.expert(&id)?, chunks)?);
    }
    Ok(out)
}

/// Pre-average transfer: weight experts by zero-shot loss on the training
/// half, average, then few-shot fine-tune the merged expert.
pub fn transfer_pre_avg(
    set: &ParameterSet,
    label: &str,
    target: &[Example],
    vocab: &Vocab,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let (train, val) = split_halves(target, cfg.k)?;
    let mp = set.config.max_positions;
    let train_chunks = chunk_all(train, vocab, mp, cfg.stride)?;
    let val_chunks = chunk_all(val, vocab, mp, cfg.stride)?;
    let probes = probe_losses(set, &train_chunks)?;
    let alpha = mixture_weights(&probes)?;
    let ids = set.dataset_ids();
    let experts: Vec<&Expert> = ids.iter().map(|id| &set.experts[id]).collect();
    let merged = weighted_average(&experts, &alpha)?;

    let mut tuned = set.clone();
    tuned.experts.insert(label.to_string(), merged);
    let (steps, best_val_loss) = few_shot_tune(&mut tuned, label, &train_chunks, &val_chunks, cfg)?;
    let expert = tuned.experts[label].clone();
    Ok(TransferOutcome {
        set: tuned,
        expert,
        alpha: Some(alpha),
        probe_losses: probes,
        steps,
        best_val_loss,
    })
}

/// Post-average transfer: jointly tune every expert under the marginal
/// likelihood on the training half, weight by held-out loss, then average.
pub fn transfer_post_avg(
    set: &ParameterSet,
    target: &[Example],
    vocab: &Vocab,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let (train, val) = split_halves(target, cfg.k)?;
    let mp = set.config.max_positions;
    let train_chunks = chunk_all(train, vocab, mp, cfg.stride)?;
    let val_chunks = chunk_all(val, vocab, mp, cfg.stride)?;
    let ids = set.dataset_ids();

    let mut tuned = set.clone();
    let mut sampler = BatchSampler::new(vec![train_chunks.len()], cfg.seed)?;
    let mut opt = OptimizerState::new();
    let lr_for = |path: &str| {
        if path.starts_with("backbone/") {
            cfg.backbone_lr
        } else {
            cfg.adapter_lr
        }
    };
    let val_marginal = |set: &ParameterSet| -> Result<f64> {
        let mut total = 0.0;
        for c in &val_chunks {
            let mut g = Graph::new();
            let bindings: Vec<ModelBinding<'_>> = ids
                .iter()
                .map(|id| ModelBinding::new(set, id).map(ModelBinding::frozen))
                .collect::<std::result::Result<_, _>>()?;
            let loss = marginal_nll(&mut g, &bindings, c)?;
            total += g.value(loss).item();
        }
        Ok(total / val_chunks.len() as f64)
    };

    let mut best = val_marginal(&tuned)?;
    let mut best_params = tuned.clone();
    let mut stale = 0usize;
    let mut step = 0u64;
    while step < cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(batch.len());
        for (_, ci) in batch {
            let bindings: Vec<ModelBinding<'_>> = ids
                .iter()
                .map(|id| {
                    ModelBinding::new(&tuned, id).map(|mut b| {
                        b.freeze_backbone = cfg.freeze_backbone;
                        b
                    })
                })
                .collect::<std::result::Result<_, _>>()?;
            losses.push(marginal_nll(&mut g, &bindings, &train_chunks[ci])?);
        }
        let stacked = g.stack_scalars(&losses)?;
        let loss = g.mean(stacked)?;
        let grads = g.backward(loss)?;
        adamw_step(&mut opt, &mut tuned, &grads, &lr_for, &cfg.adam)?;
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val_marginal(&tuned)?;
            if v < best {
                best = v;
                best_params = tuned.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let tuned = best_params;

    // alpha from each tuned expert's loss on the held-out half
    let probes = probe_losses(&tuned, &val_chunks)?;
    let alpha = mixture_weights(&probes)?;
    let experts: Vec<&Expert> = ids.iter().map(|id| &tuned.experts[id]).collect();
    let expert = weighted_average(&experts, &alpha)?;
    Ok(TransferOutcome {
        set: tuned,
        expert,
        alpha: Some(alpha),
        probe_losses: probes,
        steps: step,
        best_val_loss: best,
    })
}

/// Few-shot fine-tuning of a given initial expert (e.g. a trained baseline
/// head, or an averaged expert without loss weighting).
pub fn transfer_tune_expert(
    set: &ParameterSet,
    label: &str,
    init: Expert,
    target: &[Example],
    vocab: &Vocab,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let (train, val) = split_halves(target, cfg.k)?;
    let mp = set.config.max_positions;
    let train_chunks = chunk_all(train, vocab, mp, cfg.stride)?;
    let val_chunks = chunk_all(val, vocab, mp, cfg.stride)?;
    let mut tuned = set.clone();
    tuned.experts.insert(label.to_string(), init);
    let (steps, best_val_loss) = few_shot_tune(&mut tuned, label, &train_chunks, &val_chunks, cfg)?;
    let expert = tuned.experts[label].clone();
    Ok(TransferOutcome {
        set: tuned,
        expert,
        alpha: None,
        probe_losses: Vec::new(),
        steps,
        best_val_loss,
    })
}

/// Few-shot baseline: fine-tune a freshly initialized expert on the training
/// half with no knowledge transfer from the source experts.
pub fn transfer_baseline(
    set: &ParameterSet,
    label: &str,
    target: &[Example],
    vocab: &Vocab,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let (train, val) = split_halves(target, cfg.k)?;
    let mp = set.config.max_positions;
    let train_chunks = chunk_all(train, vocab, mp, cfg.stride)?;
    let val_chunks = chunk_all(val, vocab, mp, cfg.stride)?;
    let with_adapter = set.experts.values().next().map_or(true, |e| e.adapter.is_some());
    let fresh = set.fresh_expert(with_adapter, cfg.seed.wrapping_add(1));
    let mut tuned = set.clone();
    tuned.experts.insert(label.to_string(), fresh);
    let (steps, best_val_loss) = few_shot_tune(&mut tuned, label, &train_chunks, &val_chunks, cfg)?;
    let expert = tuned.experts[label].clone();
    Ok(TransferOutcome {
        set: tuned,
        expert,
        alpha: None,
        probe_losses: Vec::new(),
        steps,
        best_val_loss,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub seed: u64,
    pub alpha: Option<BTreeMap<String, f64>>,
    pub probe_losses: BTreeMap<String, f64>,
    pub steps: u64,
    pub best_val_loss: f64,
    pub test_em: f64,
    pub test_f1: f64,
}
