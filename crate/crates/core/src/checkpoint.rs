//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, u64 little-endian manifest length, JSON manifest,
//! then every tensor's f64 values little-endian, concatenated in manifest
//! order. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BatchSampler;
use crate::model::{Expert, ModelConfig, ParamMap, ParameterSet};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainState};

const MAGIC: &[u8; 8] = b"QAMIXCK\0";
const FORMAT_VERSION: u32 = 1;
/// Sanity cap so a corrupted length field cannot trigger a huge allocation.
const MAX_MANIFEST_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("manifest inconsistency: {0}")]
    Manifest(String),
    #[error("model config mismatch: checkpoint was written with a different configuration")]
    ConfigMismatch,
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    dataset_ids: Vec<String>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: model parameters plus any auxiliary tensors
/// (e.g. optimizer moments) and string metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dataset_ids: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_set(set: &ParameterSet, metadata: BTreeMap<String, String>) -> Self {
        let tensors = set
            .iter_paths()
            .into_iter()
            .map(|(path, t)| (path, t.clone()))
            .collect();
        Checkpoint {
            config: set.config.clone(),
            dataset_ids: set.dataset_ids(),
            metadata,
            tensors,
        }
    }

    /// Store optimizer moments alongside the parameters.
    pub fn attach_optimizer(&mut self, opt: &OptimizerState) {
        for (path, t) in &opt.m {
            self.tensors.insert(format!("opt/m/{path}"), t.clone());
        }
        for (path, t) in &opt.v {
            self.tensors.insert(format!("opt/v/{path}"), t.clone());
        }
        self.metadata.insert("opt_t".into(), opt.t.to_string());
    }

    /// Store the full training state for exact resume.
    pub fn attach_train_state(&mut self, state: &TrainState) -> Result<()> {
        self.attach_optimizer(&state.opt);
        self.metadata.insert("step".into(), state.step.to_string());
        self.metadata
            .insert("sampler".into(), serde_json::to_string(&state.sampler)?);
        Ok(())
    }

    pub fn train_state(&self) -> Result<Option<TrainState>> {
        let (Some(step), Some(sampler)) =
            (self.metadata.get("step"), self.metadata.get("sampler"))
        else {
            return Ok(None);
        };
        let step: u64 = step
            .parse()
            .map_err(|_| CheckpointError::Manifest("bad step metadata".into()))?;
        let sampler: BatchSampler = serde_json::from_str(sampler)?;
        let t: u64 = self
            .metadata
            .get("opt_t")
            .ok_or_else(|| CheckpointError::Manifest("missing opt_t metadata".into()))?
            .parse()
            .map_err(|_| CheckpointError::Manifest("bad opt_t metadata".into()))?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            if let Some(p) = name.strip_prefix("opt/m/") {
                m.insert(p.to_string(), tensor.clone());
            } else if let Some(p) = name.strip_prefix("opt/v/") {
                v.insert(p.to_string(), tensor.clone());
            }
        }
        Ok(Some(TrainState {
            opt: OptimizerState { m, v, t },
            sampler,
            step,
        }))
    }

    /// Rebuild the parameter set from the model tensors (auxiliary `opt/...`
    /// tensors are ignored).
    pub fn to_parameter_set(&self) -> Result<ParameterSet> {
        let mut backbone = ParamMap::new();
        let mut experts: BTreeMap<String, Expert> = BTreeMap::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix("backbone/") {
                backbone.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("expert/") {
                let (id, sub) = rest.split_once('/').ok_or_else(|| {
                    CheckpointError::Manifest(format!("malformed tensor path {name}"))
                })?;
                let expert = experts.entry(id.to_string()).or_insert_with(|| Expert {
                    adapter: None,
                    head: ParamMap::new(),
                });
                if let Some(a) = sub.strip_prefix("adapter/") {
                    expert
                        .adapter
                        .get_or_insert_with(ParamMap::new)
                        .insert(a.to_string(), t.clone());
                } else if let Some(h) = sub.strip_prefix("head/") {
                    expert.head.insert(h.to_string(), t.clone());
                } else {
                    return Err(CheckpointError::Manifest(format!(
                        "malformed tensor path {name}"
                    )));
                }
            } else if !name.starts_with("opt/") {
                return Err(CheckpointError::Manifest(format!(
                    "unknown tensor namespace in {name}"
                )));
            }
        }
        if backbone.is_empty() {
            return Err(CheckpointError::Manifest("no backbone tensors".into()));
        }
        let ids: Vec<String> = experts.keys().cloned().collect();
        if ids != self.dataset_ids {
            return Err(CheckpointError::Manifest(format!(
                "dataset ids {:?} do not match expert tensors {ids:?}",
                self.dataset_ids
            )));
        }
        Ok(ParameterSet {
            config: self.config.clone(),
            backbone,
            experts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.numel() * 8) as u64;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.config.clone(),
            dataset_ids: self.dataset_ids.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for t in self.tensors.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        // write to a sibling temp file, then rename into place
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&out)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if mlen > MAX_MANIFEST_BYTES || 16 + mlen as usize > bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "manifest claims {mlen} bytes, file has {}",
                bytes.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen as usize])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let payload = &bytes[16 + mlen as usize..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in &manifest.tensors {
            if entry.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(format!(
                    "tensor {} needs bytes {start}..{end}, payload has {}",
                    entry.name,
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(CheckpointError::Manifest(format!(
                    "duplicate tensor {}",
                    entry.name
                )));
            }
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(CheckpointError::Truncated(format!(
                "payload has {} bytes, manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            config: manifest.model_config,
            dataset_ids: manifest.dataset_ids,
            metadata: manifest.metadata,
            tensors,
        })
    }

    /// Load and reject checkpoints written under a different model config.
    pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        if &ck.config != config {
            return Err(CheckpointError::ConfigMismatch);
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_set() -> ParameterSet {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: 16,
            max_positions: 12,
            adapter_dim: 2,
            layer_norm_eps: 1e-6,
        };
        ParameterSet::init(cfg, &["a".to_string(), "b".to_string()], true, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = toy_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut meta = BTreeMap::new();
        meta.insert("phase".to_string(), "joint".to_string());
        let ck = Checkpoint::from_set(&set, meta);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.metadata["phase"], "joint");
        let set2 = loaded.to_parameter_set().unwrap();
        for (path, t) in set.iter_paths() {
            let t2 = set2.get(&path).unwrap();
            assert_eq!(t.shape(), t2.shape());
            // bit-exact, not just approximately equal
            for (a, b) in t.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{path}");
            }
        }
        // save -> load -> save is byte-identical
        let path2 = dir.path().join("ck2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn manifest_lists_every_parameter_once() {
        let set = toy_set();
        let ck = Checkpoint::from_set(&set, BTreeMap::new());
        let paths: Vec<String> = set.iter_paths().into_iter().map(|(p, _)| p).collect();
        assert_eq!(ck.tensors.len(), paths.len());
        for p in paths {
            assert!(ck.tensors.contains_key(&p), "missing {p}");
        }
    }

    #[test]
    fn corrupted_and_mismatched_files_fail() {
        let set = toy_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::from_set(&set, BTreeMap::new()).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // truncated payload
        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            Checkpoint::load(&cut),
            Err(CheckpointError::Truncated(_))
        ));

        // bad magic
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let badp = dir.path().join("bad.bin");
        fs::write(&badp, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&badp), Err(CheckpointError::BadMagic)));

        // version bump
        let mut v = Checkpoint::from_set(&set, BTreeMap::new());
        v.metadata.clear();
        let vp = dir.path().join("v.bin");
        v.save(&vp).unwrap();
        let mut vb = fs::read(&vp).unwrap();
        // patch "format_version":1 in the JSON manifest
        let needle = b"\"format_version\":1";
        let pos = vb
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        vb[pos + needle.len() - 1] = b'9';
        fs::write(&vp, &vb).unwrap();
        assert!(matches!(Checkpoint::load(&vp), Err(CheckpointError::Version(9))));

        // config mismatch fails loudly
        let mut other = set.config.clone();
        other.d_model = 4;
        other.num_heads = 1;
        assert!(matches!(
            Checkpoint::load_expecting(&path, &other),
            Err(CheckpointError::ConfigMismatch)
        ));
        assert!(Checkpoint::load_expecting(&path, &set.config).is_ok());
    }

    #[test]
    fn train_state_round_trip() {
        let set = toy_set();
        let mut opt = OptimizerState::new();
        opt.t = 17;
        opt.m.insert(
            "backbone/tok_emb".into(),
            set.get("backbone/tok_emb").unwrap().clone(),
        );
        opt.v.insert(
            "backbone/tok_emb".into(),
            set.get("backbone/tok_emb").unwrap().clone(),
        );
        let mut sampler = BatchSampler::new(vec![5, 7], 3).unwrap();
        let _ = sampler.next_batch(4); // advance the rng
        let state = TrainState {
            opt,
            sampler: sampler.clone(),
            step: 42,
        };
        let mut ck = Checkpoint::from_set(&set, BTreeMap::new());
        ck.attach_train_state(&state).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let got = loaded.train_state().unwrap().unwrap();
        assert_eq!(got.step, 42);
        assert_eq!(got.opt.t, 17);
        assert_eq!(
            got.opt.m["backbone/tok_emb"].data(),
            set.get("backbone/tok_emb").unwrap().data()
        );
        // restored sampler continues the exact same stream
        let mut a = sampler;
        let mut b = got.sampler;
        for _ in 0..5 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
        // a plain parameter checkpoint has no train state
        let plain = Checkpoint::from_set(&set, BTreeMap::new());
        assert!(plain.train_state().unwrap().is_none());
    }
}
