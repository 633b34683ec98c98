//! Adapter-equipped transformer encoder with per-dataset span heads.
//!
//! Parameters are partitioned into a shared backbone, per-dataset bottleneck
//! adapters (two slots per layer, after the attention and feed-forward
//! sublayers, inside the residual before the post-norm), and per-dataset
//! start/end span classifiers. Adapter up-projections start at zero so a
//! fresh adapter is an exact identity.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Adapter bottleneck width m.
    pub adapter_dim: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.adapter_dim == 0 {
            return Err(TensorError::Invalid("adapter_dim must be >= 1".into()));
        }
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(TensorError::Invalid("zero-sized model dimension".into()));
        }
        if self.vocab_size < 4 {
            return Err(TensorError::Invalid("vocab_size must cover reserved tokens".into()));
        }
        Ok(())
    }
}

pub type ParamMap = BTreeMap<String, Tensor>;

/// One dataset expert: an optional adapter plus a span head.
/// Plain fine-tuning baselines use an expert without an adapter.
#[derive(Debug, Clone)]
pub struct Expert {
    pub adapter: Option<ParamMap>,
    pub head: ParamMap,
}

#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub backbone: ParamMap,
    pub experts: BTreeMap<String, Expert>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn init_backbone(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamMap {
    let d = cfg.d_model;
    let mut p = ParamMap::new();
    p.insert("tok_emb".into(), trunc_normal(rng, &[cfg.vocab_size, d], INIT_STD));
    p.insert("pos_emb".into(), trunc_normal(rng, &[cfg.max_positions, d], INIT_STD));
    for l in 0..cfg.num_layers {
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("layer{l}/attn/{name}"), trunc_normal(rng, &[d, d], INIT_STD));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("layer{l}/attn/{name}"), Tensor::zeros(&[d]));
        }
        p.insert(format!("layer{l}/ffn/w1"), trunc_normal(rng, &[d, cfg.d_ff], INIT_STD));
        p.insert(format!("layer{l}/ffn/b1"), Tensor::zeros(&[cfg.d_ff]));
        p.insert(format!("layer{l}/ffn/w2"), trunc_normal(rng, &[cfg.d_ff, d], INIT_STD));
        p.insert(format!("layer{l}/ffn/b2"), Tensor::zeros(&[d]));
        for ln in ["attn_ln", "ffn_ln"] {
            p.insert(format!("layer{l}/{ln}/gain"), Tensor::full(&[d], 1.0));
            p.insert(format!("layer{l}/{ln}/bias"), Tensor::zeros(&[d]));
        }
    }
    p
}

fn init_adapter(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamMap {
    let (d, m) = (cfg.d_model, cfg.adapter_dim);
    let mut p = ParamMap::new();
    for l in 0..cfg.num_layers {
        for slot in ["attn", "ffn"] {
            p.insert(format!("layer{l}/{slot}/down_w"), trunc_normal(rng, &[d, m], INIT_STD));
            p.insert(format!("layer{l}/{slot}/down_b"), Tensor::zeros(&[m]));
            // zero up-projection: identity at initialization
            p.insert(format!("layer{l}/{slot}/up_w"), Tensor::zeros(&[m, d]));
            p.insert(format!("layer{l}/{slot}/up_b"), Tensor::zeros(&[d]));
        }
    }
    p
}

fn init_head(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamMap {
    let mut p = ParamMap::new();
    p.insert("w".into(), trunc_normal(rng, &[cfg.d_model, 2], INIT_STD));
    p.insert("b".into(), Tensor::zeros(&[2]));
    p
}

impl ParameterSet {
    /// Initialize a backbone plus one expert per dataset id.
    /// `with_adapters: false` yields adapter-free experts (fine-tuning baseline).
    pub fn init(config: ModelConfig, dataset_ids: &[String], with_adapters: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = init_backbone(&config, &mut rng);
        let mut experts = BTreeMap::new();
        for id in dataset_ids {
            let adapter = with_adapters.then(|| init_adapter(&config, &mut rng));
            let head = init_head(&config, &mut rng);
            if experts.insert(id.clone(), Expert { adapter, head }).is_some() {
                return Err(TensorError::Invalid(format!("duplicate dataset id {id}")));
            }
        }
        Ok(ParameterSet {
            config,
            backbone,
            experts,
    })
    }

    pub fn fresh_expert(&self, with_adapter: bool, seed: u64) -> Expert {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Expert {
            adapter: with_adapter.then(|| init_adapter(&self.config, &mut rng)),
            head: init_head(&self.config, &mut rng),
        }
    }

    pub fn expert(&self, id: &str) -> Result<&Expert> {
        self.experts
            .get(id)
            .ok_or_else(|| TensorError::Invalid(format!("unknown dataset id {id}")))
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.experts.keys().cloned().collect()
    }

    /// Flat view of every tensor, in deterministic path order.
    pub fn iter_paths(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.backbone {
            out.push((format!("backbone/{name}"), t));
        }
        for (id, ex) in &self.experts {
            if let Some(ad) = &ex.adapter {
                for (name, t) in ad {
                    out.push((format!("expert/{id}/adapter/{name}"), t));
                }
            }
            for (name, t) in &ex.head {
                out.push((format!("expert/{id}/head/{name}"), t));
            }
        }
        out
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        if let Some(rest) = path.strip_prefix("backbone/") {
            return self.backbone.get_mut(rest);
        }
        let rest = path.strip_prefix("expert/")?;
        let (id, rest) = rest.split_once('/')?;
        let ex = self.experts.get_mut(id)?;
        if let Some(name) = rest.strip_prefix("adapter/") {
            return ex.adapter.as_mut()?.get_mut(name);
        }
        ex.head.get_mut(rest.strip_prefix("head/")?)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        if let Some(rest) = path.strip_prefix("backbone/") {
            return self.backbone.get(rest);
        }
        let rest = path.strip_prefix("expert/")?;
        let (id, rest) = rest.split_once('/')?;
        let ex = self.experts.get(id)?;
        if let Some(name) = rest.strip_prefix("adapter/") {
            return ex.adapter.as_ref()?.get(name);
        }
        ex.head.get(rest.strip_prefix("head/")?)
    }
}

/// Closed-form parameter counts for a config.
pub fn counts_for_config(cfg: &ModelConfig) -> (usize, usize, usize) {
    let (d, m, ff) = (cfg.d_model, cfg.adapter_dim, cfg.d_ff);
    let per_layer = 4 * (d * d + d) + (d * ff + ff + ff * d + d) + 2 * 2 * d;
    let backbone = cfg.vocab_size * d + cfg.max_positions * d + cfg.num_layers * per_layer;
    let adapter = cfg.num_layers * 2 * (2 * d * m + m + d);
    let head = d * 2 + 2;
    (backbone, adapter, head)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamStats {
    pub backbone_count: usize,
    pub per_adapter_count: usize,
    pub head_count: usize,
    pub overhead_ratio: f64,
}

pub fn param_stats(set: &ParameterSet) -> ParamStats {
    let backbone_count: usize = set.backbone.values().map(|t| t.numel()).sum();
    let per_adapter_count = set
        .experts
        .values()
        .find_map(|e| e.adapter.as_ref())
        .map(|a| a.values().map(|t| t.numel()).sum())
        .unwrap_or(0);
    let head_count = set
        .experts
        .values()
        .next()
        .map(|e| e.head.values().map(|t| t.numel()).sum())
        .unwrap_or(0);
    ParamStats {
        backbone_count,
        per_adapter_count,
        head_count,
        overhead_ratio: per_adapter_count as f64 / backbone_count as f64,
    }
}

/// Binds one expert (possibly detached from the set) plus the shared backbone
/// into a graph, with independent freeze control per partition.
pub struct ModelBinding<'a> {
    pub config: &'a ModelConfig,
    pub backbone: &'a ParamMap,
    pub expert_id: String,
    pub expert: &'a Expert,
    pub freeze_backbone: bool,
    pub freeze_expert: bool,
}

impl<'a> ModelBinding<'a> {
    pub fn new(set: &'a ParameterSet, dataset_id: &str) -> Result<Self> {
        Ok(ModelBinding {
            config: &set.config,
            backbone: &set.backbone,
            expert_id: dataset_id.to_string(),
            expert: set.expert(dataset_id)?,
            freeze_backbone: false,
            freeze_expert: false,
        })
    }

    /// Bind an expert that is not stored in the set (e.g. an averaged one).
    pub fn detached(set: &'a ParameterSet, label: &str, expert: &'a Expert) -> Self {
        ModelBinding {
            config: &set.config,
            backbone: &set.backbone,
            expert_id: label.to_string(),
            expert,
            freeze_backbone: false,
            freeze_expert: false,
        }
    }

    pub fn frozen_backbone(mut self) -> Self {
        self.freeze_backbone = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.freeze_backbone = true;
        self.freeze_expert = true;
        self
    }

    fn bind(&self, g: &mut Graph, path: String, t: &Tensor, frozen: bool) -> Result<NodeId> {
        if frozen {
            g.frozen_param(&path, t.clone())
        } else {
            g.param(&path, t.clone())
        }
    }

    fn backbone_param(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self
            .backbone
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing backbone tensor {name}")))?;
        self.bind(g, format!("backbone/{name}"), t, self.freeze_backbone)
    }

    fn adapter_param(&self, g: &mut Graph, adapter: &ParamMap, name: &str) -> Result<NodeId> {
        let t = adapter
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing adapter tensor {name}")))?;
        self.bind(
            g,
            format!("expert/{}/adapter/{name}", self.expert_id),
            t,
            self.freeze_expert,
        )
    }

    fn head_param(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self
            .expert
            .head
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing head tensor {name}")))?;
        self.bind(
            g,
            format!("expert/{}/head/{name}", self.expert_id),
            t,
            self.freeze_expert,
        )
    }

    fn adapter_slot(&self, g: &mut Graph, x: NodeId, layer: usize, slot: &str) -> Result<NodeId> {
        let adapter = match &self.expert.adapter {
            Some(a) => a,
            None => return Ok(x),
        };
        let dw = self.adapter_param(g, adapter, &format!("layer{layer}/{slot}/down_w"))?;
        let db = self.adapter_param(g, adapter, &format!("layer{layer}/{slot}/down_b"))?;
        let uw = self.adapter_param(g, adapter, &format!("layer{layer}/{slot}/up_w"))?;
        let ub = self.adapter_param(g, adapter, &format!("layer{layer}/{slot}/up_b"))?;
        let down = g.matmul(x, dw)?;
        let down = g.add_row(down, db)?;
        let act = g.gelu(down)?;
        let up = g.matmul(act, uw)?;
        let up = g.add_row(up, ub)?;
        g.add(x, up)
    }

    /// Full encoder pass: token + position embeddings, then `num_layers`
    /// post-norm blocks with adapter slots after each sublayer.
    /// Returns hidden states of shape (len, d_model).
    pub fn encode(&self, g: &mut Graph, token_ids: &[usize], attn_mask: &[bool]) -> Result<NodeId> {
        let cfg = self.config;
        let len = token_ids.len();
        if len == 0 {
            return Err(TensorError::Invalid("empty input sequence".into()));
        }
        if len > cfg.max_positions {
            return Err(TensorError::Invalid(format!(
                "sequence length {len} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if attn_mask.len() != len {
            return Err(TensorError::ShapeMismatch(vec![attn_mask.len()], vec![len]));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(TensorError::IndexOutOfBounds {
                index: bad,
                len: cfg.vocab_size,
                context: "token id".into(),
            });
        }

        let tok_emb = self.backbone_param(g, "tok_emb")?;
        let pos_emb = self.backbone_param(g, "pos_emb")?;
        let tok = g.gather_rows(tok_emb, token_ids)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos_emb, &positions)?;
        let mut h = g.add(tok, pos)?;

        let nh = cfg.num_heads;
        let dh = cfg.d_model / nh;
        // column mask: attention may not attend to masked (padding) positions
        let col_mask: Vec<bool> = (0..len * len).map(|i| !attn_mask[i % len]).collect();
        let any_masked = attn_mask.iter().any(|m| !m);

        for l in 0..cfg.num_layers {
            // self-attention sublayer
            let wq = self.backbone_param(g, &format!("layer{l}/attn/wq"))?;
            let bq = self.backbone_param(g, &format!("layer{l}/attn/bq"))?;
            let wk = self.backbone_param(g, &format!("layer{l}/attn/wk"))?;
            let bk = self.backbone_param(g, &format!("layer{l}/attn/bk"))?;
            let wv = self.backbone_param(g, &format!("layer{l}/attn/wv"))?;
            let bv = self.backbone_param(g, &format!("layer{l}/attn/bv"))?;
            let wo = self.backbone_param(g, &format!("layer{l}/attn/wo"))?;
            let bo = self.backbone_param(g, &format!("layer{l}/attn/bo"))?;

            let q = g.matmul(h, wq)?;
            let q = g.add_row(q, bq)?;
            let k = g.matmul(h, wk)?;
            let k = g.add_row(k, bk)?;
            let v = g.matmul(h, wv)?;
            let v = g.add_row(v, bv)?;

            let mut head_outs = Vec::with_capacity(nh);
            for hd in 0..nh {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let scores = if any_masked {
                    g.masked_fill(scores, &col_mask)?
                } else {
                    scores
                };
                let probs = g.softmax_rows(scores)?;
                head_outs.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&head_outs)?;
            let attn_out = g.matmul(ctx, wo)?;
            let attn_out = g.add_row(attn_out, bo)?;
            let attn_out = self.adapter_slot(g, attn_out, l, "attn")?;
            let res = g.add(h, attn_out)?;
            let gain = self.backbone_param(g, &format!("layer{l}/attn_ln/gain"))?;
            let bias = self.backbone_param(g, &format!("layer{l}/attn_ln/bias"))?;
            h = g.layer_norm(res, gain, bias, cfg.layer_norm_eps)?;

            // feed-forward sublayer
            let w1 = self.backbone_param(g, &format!("layer{l}/ffn/w1"))?;
            let b1 = self.backbone_param(g, &format!("layer{l}/ffn/b1"))?;
            let w2 = self.backbone_param(g, &format!("layer{l}/ffn/w2"))?;
            let b2 = self.backbone_param(g, &format!("layer{l}/ffn/b2"))?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            let f = self.adapter_slot(g, f, l, "ffn")?;
            let res = g.add(h, f)?;
            let gain = self.backbone_param(g, &format!("layer{l}/ffn_ln/gain"))?;
            let bias = self.backbone_param(g, &format!("layer{l}/ffn_ln/bias"))?;
            h = g.layer_norm(res, gain, bias, cfg.layer_norm_eps)?;
        }
        Ok(h)
    }

    /// Start/end log-probability distributions over positions.
    /// `eligible` marks positions that may be an answer boundary (CLS and
    /// context tokens); everything else is masked out before the softmax.
    pub fn span_log_probs(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        eligible: &[bool],
    ) -> Result<(NodeId, NodeId)> {
        let len = g.value(hidden).rows();
        if eligible.len() != len {
            return Err(TensorError::ShapeMismatch(vec![eligible.len()], vec![len]));
        }
        if !eligible.iter().any(|&e| e) {
            return Err(TensorError::Invalid("all positions masked".into()));
        }
        let w = self.head_param(g, "w")?;
        let b = self.head_param(g, "b")?;
        let logits = g.matmul(hidden, w)?;
        let logits = g.add_row(logits, b)?;
        let not_eligible: Vec<bool> = eligible.iter().map(|&e| !e).collect();
        let mut dists = Vec::with_capacity(2);
        for col in 0..2 {
            let c = g.slice_cols(logits, col, 1)?;
            let v = g.reshape(c, vec![len])?;
            let m = g.masked_fill(v, &not_eligible)?;
            dists.push(g.log_softmax(m, 0)?);
        }
        Ok((dists[0], dists[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn toy_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            num_heads: 2,
            d_ff: 24,
            vocab_size: 20,
            max_positions: 16,
            adapter_dim: 4,
            layer_norm_eps: 1e-6,
        }
    }

    fn forward(set: &ParameterSet, id: &str, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let b = ModelBinding::new(set, id).unwrap();
        let mask = vec![true; ids.len()];
        let h = b.encode(&mut g, ids, &mask).unwrap();
        g.value(h).data().to_vec()
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let s1 = ParameterSet::init(toy_config(), &ids, true, 42).unwrap();
        let s2 = ParameterSet::init(toy_config(), &ids, true, 42).unwrap();
        for ((p1, t1), (_p2, t2)) in s1.iter_paths().iter().zip(s2.iter_paths()) {
            assert_eq!(t1.data(), t2.data(), "{p1}");
        }
        let s3 = ParameterSet::init(toy_config(), &ids, true, 43).unwrap();
        assert_ne!(
            s1.backbone["tok_emb"].data(),
            s3.backbone["tok_emb"].data()
        );
    }

    #[test]
    fn adapter_up_projection_zero_at_init() {
        let ids = vec!["a".to_string()];
        let s = ParameterSet::init(toy_config(), &ids, true, 1).unwrap();
        let ad = s.experts["a"].adapter.as_ref().unwrap();
        for (name, t) in ad {
            if name.contains("up_") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let ids = vec!["a".to_string()];
        let mut s = ParameterSet::init(toy_config(), &ids, true, 5).unwrap();
        let with = forward(&s, "a", &[1, 4, 7, 2]);
        s.experts.get_mut("a").unwrap().adapter = None;
        let without = forward(&s, "a", &[1, 4, 7, 2]);
        assert_eq!(with, without, "zero-init adapter must not change encode");
    }

    #[test]
    fn encode_shape_and_determinism() {
        let ids = vec!["a".to_string()];
        let s = ParameterSet::init(toy_config(), &ids, true, 5).unwrap();
        let mut g = Graph::new();
        let b = ModelBinding::new(&s, "a").unwrap();
        let h = b.encode(&mut g, &[1, 2, 3], &[true; 3]).unwrap();
        assert_eq!(g.value(h).shape(), &[3, 16]);
        assert_eq!(forward(&s, "a", &[1, 2, 3]), forward(&s, "a", &[1, 2, 3]));
    }

    #[test]
    fn encode_errors() {
        let ids = vec!["a".to_string()];
        let s = ParameterSet::init(toy_config(), &ids, true, 5).unwrap();
        assert!(ModelBinding::new(&s, "nope").is_err());
        let mut g = Graph::new();
        let b = ModelBinding::new(&s, "a").unwrap();
        let long: Vec<usize> = vec![1; 17];
        assert!(b.encode(&mut g, &long, &vec![true; 17]).is_err());
    }

    #[test]
    fn swapping_expert_adapters_swaps_outputs() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut s = ParameterSet::init(toy_config(), &ids, true, 9).unwrap();
        // perturb the adapters so they differ
        for id in ["a", "b"] {
            let ad = s.experts.get_mut(id).unwrap().adapter.as_mut().unwrap();
            for (name, t) in ad.iter_mut() {
                if name.contains("up_w") {
                    let bump = if id == "a" { 0.1 } else { -0.2 };
                    for v in t.data_mut() {
                        *v += bump;
                    }
                }
            }
        }
        let oa = forward(&s, "a", &[1, 2, 3]);
        let ob = forward(&s, "b", &[1, 2, 3]);
        assert_ne!(oa, ob);
        let ea = s.experts["a"].clone();
        let eb = s.experts["b"].clone();
        s.experts.insert("a".into(), eb);
        s.experts.insert("b".into(), ea);
        assert_eq!(forward(&s, "a", &[1, 2, 3]), ob);
        assert_eq!(forward(&s, "b", &[1, 2, 3]), oa);
    }

    #[test]
    fn span_log_probs_normalize_pairs() {
        let ids = vec!["a".to_string()];
        let s = ParameterSet::init(toy_config(), &ids, true, 11).unwrap();
        let mut g = Graph::new();
        let b = ModelBinding::new(&s, "a").unwrap();
        let n = 6;
        let h = b.encode(&mut g, &[1, 2, 3, 4, 5, 6], &[true; 6]).unwrap();
        let eligible = [true, false, true, true, true, false];
        let (sl, el) = b.span_log_probs(&mut g, h, &eligible).unwrap();
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (g.value(sl).data()[i] + g.value(el).data()[j]).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "total pair mass {total}");
    }

    #[test]
    fn span_log_probs_all_masked_errors() {
        let ids = vec!["a".to_string()];
        let s = ParameterSet::init(toy_config(), &ids, true, 11).unwrap();
        let mut g = Graph::new();
        let b = ModelBinding::new(&s, "a").unwrap();
        let h = b.encode(&mut g, &[1, 2], &[true; 2]).unwrap();
        assert!(b.span_log_probs(&mut g, h, &[false, false]).is_err());
    }

    #[test]
    fn param_accounting_formula() {
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 200,
            max_positions: 64,
            adapter_dim: 8,
            layer_norm_eps: 1e-6,
        };
        let (_b, adapter, _h) = counts_for_config(&cfg);
        assert_eq!(adapter, 4384); // 2*2*(2*64*8 + 8 + 64)
        let s = ParameterSet::init(cfg, &["a".to_string()], true, 0).unwrap();
        let stats = param_stats(&s);
        assert_eq!(stats.per_adapter_count, 4384);
    }

    #[test]
    fn zero_adapter_dim_rejected() {
        let mut cfg = toy_config();
        cfg.adapter_dim = 0;
        assert!(cfg.validate().is_err());
    }
}
