//! Synthetic extractive-QA data, JSONL ingestion, sliding-window chunking,
//! and mixed-batch sampling.
//!
//! The synthetic task family is key-value lookup: contexts are shuffled
//! "key value" pair sequences (optionally with filler tokens, repeated-key
//! distractors, one-hop aliases, and duplicated answer values), and the
//! question names a key. The heterogeneity axes (vocabulary range, answer
//! position bias, indirection, distractors, context length) stand in for a
//! collection of QA corpora with measurable distribution shift.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON on line {line} of {path}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[pad]", "[cls]", "[sep]", "[unk]"];

/// Token string <-> id bijection with fixed reserved ids 0..3.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from all tokens appearing in the given examples, sorted for
    /// determinism.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Vocab {
        let mut set = std::collections::BTreeSet::new();
        for ex in examples {
            for t in ex.question.iter().chain(&ex.context) {
                set.insert(t.clone());
            }
            for a in &ex.answers {
                for t in a.split_whitespace() {
                    set.insert(t.to_string());
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(set.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuild from a previously saved token list (e.g. checkpoint metadata).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(str::to_string)
        {
            return Err(DataError::Invalid("token list missing reserved prefix".into()));
        }
        let index: BTreeMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(DataError::Invalid("duplicate token in vocabulary".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// A QA instance: question, context, gold answer strings, and every
/// occurrence span (inclusive token indices into the context) of any gold.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub question: Vec<String>,
    pub context: Vec<String>,
    pub answers: Vec<String>,
    pub spans: Vec<(usize, usize)>,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        for &(s, e) in &self.spans {
            if s > e || e >= self.context.len() {
                return Err(DataError::Invalid(format!(
                    "span ({s},{e}) out of bounds for context of {} tokens in {}",
                    self.context.len(),
                    self.id
                )));
            }
            let text = self.context[s..=e].join(" ");
            if !self.answers.iter().any(|a| *a == text) {
                return Err(DataError::Invalid(format!(
                    "span ({s},{e}) text {text:?} matches no gold answer in {}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One sliding-window slice of an example, packed as [CLS] q [SEP] window.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub example_id: String,
    /// Window offset into the context, in tokens.
    pub window_offset: usize,
    pub window_len: usize,
    pub question_len: usize,
    pub token_ids: Vec<usize>,
    /// Occurrence spans remapped to window-local token indices.
    pub spans: Vec<(usize, usize)>,
    pub is_negative: bool,
}

impl Chunk {
    /// Packed position of the first context token.
    pub fn context_base(&self) -> usize {
        self.question_len + 2
    }

    /// Eligible answer-boundary positions: CLS plus every window token.
    pub fn eligible_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.token_ids.len()];
        m[0] = true;
        let base = self.context_base();
        for i in 0..self.window_len {
            m[base + i] = true;
        }
        m
    }

    /// Occurrence spans in packed coordinates.
    pub fn packed_spans(&self) -> Vec<(usize, usize)> {
        let base = self.context_base();
        self.spans.iter().map(|&(s, e)| (base + s, base + e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionBias {
    Early,
    Uniform,
    Late,
}

/// Generator knobs for one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Token-name index range [lo, hi) shared by keys/values/aliases/filler.
    pub vocab_range: (usize, usize),
    /// Target context length range in tokens (realized with filler).
    pub context_len: (usize, usize),
    /// Number of key-value pairs per context.
    pub pairs: usize,
    pub position_bias: PositionBias,
    /// Chance each non-query key is repeated with a wrong value.
    pub distractor_rate: f64,
    /// 0 = question names the key directly; 1 = question names a one-hop alias.
    pub indirection: usize,
    /// Chance the gold value recurs in another pair (distant supervision).
    pub duplicate_rate: f64,
    pub train_size: usize,
    pub dev_size: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let span = self.vocab_range.1.saturating_sub(self.vocab_range.0);
        if span < self.pairs + 2 {
            return Err(DataError::Invalid(format!(
                "vocab range {:?} too small for {} pairs in {}",
                self.vocab_range, self.pairs, self.name
            )));
        }
        for r in [self.distractor_rate, self.duplicate_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DataError::Invalid(format!("rate {r} outside [0,1]")));
            }
        }
        if self.indirection > 1 {
            return Err(DataError::Invalid("indirection depth must be 0 or 1".into()));
        }
        if self.pairs == 0 || self.train_size == 0 || self.dev_size == 0 {
            return Err(DataError::Invalid(format!(
                "pairs and sizes must be >= 1 in {}",
                self.name
            )));
        }
        Ok(())
    }
}

/// Source and target dataset specs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetCollection {
    pub sources: Vec<DatasetSpec>,
    pub targets: Vec<DatasetSpec>,
}

impl DatasetCollection {
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for spec in self.sources.iter().chain(&self.targets) {
            spec.validate()?;
            if !names.insert(spec.name.clone()) {
                return Err(DataError::Invalid(format!("duplicate dataset name {}", spec.name)));
            }
        }
        Ok(())
    }
}

fn gen_example(spec: &DatasetSpec, idx: usize, rng: &mut ChaCha8Rng) -> Example {
    let (lo, hi) = spec.vocab_range;
    let pool: Vec<usize> = (lo..hi).collect();

    // distinct keys, then values drawn from the remaining names so a value
    // token never collides with a key token
    let mut names = pool.clone();
    names.shuffle(rng);
    let keys: Vec<String> = names[..spec.pairs].iter().map(|n| format!("k{n}")).collect();
    let mut vals: Vec<String> = names[..spec.pairs].iter().map(|n| format!("v{n}")).collect();
    vals.shuffle(rng);

    let query = rng.gen_range(0..spec.pairs);
    // duplicate-answer: some other pair shares the gold value
    let mut dup_of_query = None;
    if spec.pairs > 1 && rng.gen_bool(spec.duplicate_rate) {
        let mut other = rng.gen_range(0..spec.pairs - 1);
        if other >= query {
            other += 1;
        }
        vals[other] = vals[query].clone();
        dup_of_query = Some(other);
    }

    let mut items: Vec<Vec<String>> = Vec::new();
    let mut query_item = vec![keys[query].clone(), vals[query].clone()];
    let alias = format!("a{}", names[spec.pairs % names.len()]);
    if spec.indirection == 1 {
        // alias definition pair points at the queried key
        items.push(vec![alias.clone(), keys[query].clone()]);
    }
    for i in 0..spec.pairs {
        if i == query {
            continue;
        }
        items.push(vec![keys[i].clone(), vals[i].clone()]);
        // distractor: same key again with a wrong value
        if Some(i) != dup_of_query && rng.gen_bool(spec.distractor_rate) {
            let wrong = format!("v{}", names[(spec.pairs + 1) % names.len()]);
            if wrong != vals[query] {
                items.push(vec![keys[i].clone(), wrong]);
            }
        }
    }
    items.shuffle(rng);

    // place the queried pair according to the position bias
    let slot = match spec.position_bias {
        PositionBias::Early => 0,
        PositionBias::Late => items.len(),
        PositionBias::Uniform => rng.gen_range(0..=items.len()),
    };
    items.insert(slot, std::mem::take(&mut query_item));

    // filler tokens pad toward the target context length, inserted between
    // pairs only (never splitting a "key value" adjacency)
    let target = rng.gen_range(spec.context_len.0..=spec.context_len.1.max(spec.context_len.0));
    let mut token_count: usize = items.iter().map(|u| u.len()).sum();
    while token_count < target {
        let f = format!("f{}", pool[rng.gen_range(0..pool.len())]);
        let pos = rng.gen_range(0..=items.len());
        items.insert(pos, vec![f]);
        token_count += 1;
    }
    let context: Vec<String> = items.into_iter().flatten().collect();

    let question = if spec.indirection == 1 {
        vec![alias]
    } else {
        vec![keys[query].clone()]
    };
    let answer = vals[query].clone();
    let spans: Vec<(usize, usize)> = context
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == answer)
        .map(|(i, _)| (i, i))
        .collect();

    Example {
        id: format!("{}-{}", spec.name, idx),
        question,
        context,
        answers: vec![answer],
        spans,
    }
}

/// Generate `n` examples deterministically from (spec, seed).
pub fn generate(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..n).map(|i| gen_example(spec, i, &mut rng)).collect();
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// JSONL (MRQA-style) ingestion and emission

#[derive(Serialize, Deserialize)]
struct JsonSpan {
    #[serde(skip_serializing_if = "Option::is_none")]
    token_span: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    char_span: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct JsonQa {
    qid: String,
    question: String,
    answers: Vec<String>,
    detected_answers: Vec<JsonSpan>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    context: String,
    qas: Vec<JsonQa>,
}

#[derive(Debug)]
pub struct LoadResult {
    pub examples: Vec<Example>,
    /// Records dropped because a detected span did not align with
    /// whitespace-token boundaries.
    pub skipped: usize,
}

/// Map an inclusive char span to inclusive token indices, or None if either
/// boundary splits a whitespace token.
fn char_span_to_tokens(context: &str, cs: usize, ce: usize) -> Option<(usize, usize)> {
    let mut start_tok = None;
    let mut end_tok = None;
    let mut offset = 0;
    for (i, tok) in context.split_whitespace().enumerate() {
        // find the token's byte offset starting from `offset`
        let rel = context[offset..].find(tok)?;
        let tok_start = offset + rel;
        let tok_end = tok_start + tok.len() - 1;
        if cs == tok_start {
            start_tok = Some(i);
        }
        if ce == tok_end {
            end_tok = Some(i);
        }
        offset = tok_start + tok.len();
    }
    Some((start_tok?, end_tok?))
}

pub fn load_jsonl(path: &Path) -> Result<LoadResult> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Json {
                path: path.display().to_string(),
                line: lineno + 1,
                source,
            })?;
        let context: Vec<String> = rec.context.split_whitespace().map(str::to_string).collect();
        for qa in rec.qas {
            let mut spans = Vec::new();
            let mut ok = true;
            for d in &qa.detected_answers {
                let ts = match (d.token_span, d.char_span) {
                    (Some(ts), _) => Some(ts),
                    (None, Some((cs, ce))) => char_span_to_tokens(&rec.context, cs, ce),
                    (None, None) => None,
                };
                match ts {
                    Some((s, e)) if s <= e && e < context.len() => spans.push((s, e)),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                skipped += 1;
                continue;
            }
            let ex = Example {
                id: qa.qid,
                question: qa.question.split_whitespace().map(str::to_string).collect(),
                context: context.clone(),
                answers: qa.answers,
                spans,
            };
            if ex.validate().is_err() {
                skipped += 1;
                continue;
            }
            examples.push(ex);
        }
    }
    Ok(LoadResult { examples, skipped })
}

pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let rec = JsonRecord {
            context: ex.context.join(" "),
            qas: vec![JsonQa {
                qid: ex.id.clone(),
                question: ex.question.join(" "),
                answers: ex.answers.clone(),
                detected_answers: ex
                    .spans
                    .iter()
                    .map(|&(s, e)| JsonSpan {
                        token_span: Some((s, e)),
                        char_span: None,
                    })
                    .collect(),
            }],
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| DataError::Invalid(e.to_string()))?;
        writeln!(w).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sliding-window chunking

/// Split an example into packed chunks of at most `max_positions` tokens,
/// sliding the context window by `stride` tokens. The final window is clamped
/// so it ends exactly at the context end; every context token is covered.
pub fn chunk(example: &Example, vocab: &Vocab, max_positions: usize, stride: usize) -> Result<Vec<Chunk>> {
    assert!(stride >= 1);
    let qlen = example.question.len();
    if qlen + 3 > max_positions {
        return Err(DataError::Invalid(format!(
            "question of {qlen} tokens too long for window of {max_positions} in {}",
            example.id
        )));
    }
    let capacity = max_positions - qlen - 2;
    let clen = example.context.len();
    if clen == 0 {
        return Err(DataError::Invalid(format!("empty context in {}", example.id)));
    }

    let mut offsets = Vec::new();
    let last_start = clen.saturating_sub(capacity);
    let mut o = 0;
    loop {
        let off = o.min(last_start);
        offsets.push(off);
        if off + capacity >= clen {
            break;
        }
        o += stride;
    }

    let qids = vocab.encode(&example.question);
    let mut chunks = Vec::with_capacity(offsets.len());
    for off in offsets {
        let wlen = capacity.min(clen - off);
        let mut ids = Vec::with_capacity(2 + qlen + wlen);
        ids.push(CLS);
        ids.extend_from_slice(&qids);
        ids.push(SEP);
        for t in &example.context[off..off + wlen] {
            ids.push(vocab.id(t));
        }
        let spans: Vec<(usize, usize)> = example
            .spans
            .iter()
            .filter(|&&(s, e)| s >= off && e < off + wlen)
            .map(|&(s, e)| (s - off, e - off))
            .collect();
        chunks.push(Chunk {
            example_id: example.id.clone(),
            window_offset: off,
            window_len: wlen,
            question_len: qlen,
            token_ids: ids,
            is_negative: spans.is_empty(),
            spans,
        });
    }
    Ok(chunks)
}

// ---------------------------------------------------------------------------
// Batch sampling

/// Streams mixed batches: each slot independently picks a dataset (uniformly
/// or by explicit weights) and then an item uniformly within it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSampler {
    sizes: Vec<usize>,
    weights: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(DataError::Invalid("empty dataset list".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(DataError::Invalid("empty dataset in sampler".into()));
        }
        Ok(BatchSampler {
            sizes,
            weights: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_datasets(&self) -> usize {
        self.sizes.len()
    }

    /// Replace the uniform dataset choice with an explicit distribution.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.sizes.len() {
            return Err(DataError::Invalid(format!(
                "{} weights for {} datasets",
                weights.len(),
                self.sizes.len()
            )));
        }
        self.weights = Some(weights);
        Ok(())
    }

    /// Draw one batch of (dataset index, item index) pairs.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<(usize, usize)> {
        assert!(batch_size >= 1);
        (0..batch_size)
            .map(|_| {
                let d = match &self.weights {
                    None => self.rng.gen_range(0..self.sizes.len()),
                    Some(w) => {
                        let total: f64 = w.iter().sum();
                        let mut u = self.rng.gen::<f64>() * total;
                        let mut pick = w.len() - 1;
                        for (i, &wi) in w.iter().enumerate() {
                            if u < wi {
                                pick = i;
                                break;
                            }
                            u -= wi;
                        }
                        pick
                    }
                };
                (d, self.rng.gen_range(0..self.sizes[d]))
            })
            .collect()
    }
}

/// Dynamic sampling distribution: weight each dataset by the clamped gap
/// between its best single-dataset accuracy and its current accuracy.
pub fn dynamic_weights(current: &[f64], best_single: &[f64], floor: f64) -> Result<Vec<f64>> {
    if current.len() != best_single.len() {
        return Err(DataError::Invalid(format!(
            "length mismatch: {} vs {}",
            current.len(),
            best_single.len()
        )));
    }
    assert!(floor > 0.0);
    let raw: Vec<f64> = current
        .iter()
        .zip(best_single)
        .map(|(&c, &b)| (b - c).max(floor))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basic_spec() -> DatasetSpec {
        DatasetSpec {
            name: "toy".into(),
            vocab_range: (0, 30),
            context_len: (2, 10),
            pairs: 3,
            position_bias: PositionBias::Uniform,
            distractor_rate: 0.0,
            indirection: 0,
            duplicate_rate: 0.0,
            train_size: 8,
            dev_size: 4,
        }
    }

    #[test]
    fn generate_single_pair_forced_construction() {
        let spec = DatasetSpec {
            pairs: 1,
            context_len: (2, 2),
            ..basic_spec()
        };
        let ex = &generate(&spec, 1, 0).unwrap()[0];
        assert_eq!(ex.context.len(), 2);
        assert!(ex.context[0].starts_with('k'));
        assert!(ex.context[1].starts_with('v'));
        assert_eq!(ex.question, vec![ex.context[0].clone()]);
        assert_eq!(ex.answers, vec![ex.context[1].clone()]);
        assert_eq!(ex.spans, vec![(1, 1)]);
    }

    #[test]
    fn generate_duplicate_rate_yields_multiple_spans() {
        let spec = DatasetSpec {
            pairs: 2,
            duplicate_rate: 1.0,
            context_len: (4, 4),
            ..basic_spec()
        };
        for ex in generate(&spec, 10, 3).unwrap() {
            assert_eq!(ex.spans.len(), 2, "{ex:?}");
        }
    }

    #[test]
    fn generate_deterministic_in_seed() {
        let spec = basic_spec();
        assert_eq!(generate(&spec, 20, 9).unwrap(), generate(&spec, 20, 9).unwrap());
        assert_ne!(generate(&spec, 20, 9).unwrap(), generate(&spec, 20, 10).unwrap());
    }

    #[test]
    fn generate_label_soundness() {
        for (variant, spec) in [
            ("distractors", DatasetSpec { distractor_rate: 0.8, ..basic_spec() }),
            ("indirection", DatasetSpec { indirection: 1, ..basic_spec() }),
            ("duplicates", DatasetSpec { duplicate_rate: 0.7, ..basic_spec() }),
            ("filler", DatasetSpec { context_len: (12, 20), ..basic_spec() }),
        ] {
            for ex in generate(&spec, 50, 1).unwrap() {
                ex.validate().unwrap_or_else(|e| panic!("{variant}: {e}"));
                assert!(!ex.spans.is_empty(), "{variant}: no occurrence span");
            }
        }
    }

    #[test]
    fn generate_vocab_too_small_errors() {
        let spec = DatasetSpec {
            vocab_range: (0, 3),
            ..basic_spec()
        };
        assert!(generate(&spec, 1, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let spec = basic_spec();
        let examples = generate(&spec, 5, 2).unwrap();
        save_jsonl(&path, &examples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded.skipped, 0);
        assert_eq!(loaded.examples, examples);

        // empty file -> empty list
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty).unwrap().examples.is_empty());

        // malformed line errors with line number
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"context\": \"a b\", \"qas\": []}\nnot json\n").unwrap();
        let err = load_jsonl(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn jsonl_char_span_and_misaligned_span() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        // "alpha beta": beta occupies chars 6..=9
        let good = serde_json::json!({
            "context": "alpha beta",
            "qas": [{"qid": "q1", "question": "what", "answers": ["beta"],
                     "detected_answers": [{"char_span": [6, 9]}]}]
        });
        // span [6,8] ends inside the token -> skipped
        let bad = serde_json::json!({
            "context": "alpha beta",
            "qas": [{"qid": "q2", "question": "what", "answers": ["bet"],
                     "detected_answers": [{"char_span": [6, 8]}]}]
        });
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let res = load_jsonl(&path).unwrap();
        assert_eq!(res.examples.len(), 1);
        assert_eq!(res.examples[0].spans, vec![(1, 1)]);
        assert_eq!(res.skipped, 1);
    }

    fn chunking_example(clen: usize, spans: Vec<(usize, usize)>) -> (Example, Vocab) {
        let context: Vec<String> = (0..clen).map(|i| format!("t{i}")).collect();
        let answers = spans
            .iter()
            .map(|&(s, e)| context[s..=e].join(" "))
            .collect();
        let ex = Example {
            id: "x".into(),
            question: vec!["q0".into()],
            context,
            answers,
            spans,
        };
        let vocab = Vocab::build([&ex]);
        (ex, vocab)
    }

    #[test]
    fn chunk_single_window() {
        let (ex, vocab) = chunking_example(5, vec![(2, 2)]);
        let chunks = chunk(&ex, &vocab, 16, 4).unwrap();
        assert_eq!(chunks.len(), 1);
        assert!(!chunks[0].is_negative);
        assert_eq!(chunks[0].spans, vec![(2, 2)]);
    }

    #[test]
    fn chunk_window_arithmetic() {
        // window capacity 200 context tokens, stride 128, context 300
        // -> offsets {0, 100} covering 0..=199 and 100..=299
        let (ex, vocab) = chunking_example(300, vec![(250, 251)]);
        let chunks = chunk(&ex, &vocab, 203, 128).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].window_offset, 0);
        assert_eq!(chunks[1].window_offset, 100);
        assert!(chunks[0].is_negative);
        assert_eq!(chunks[1].spans, vec![(150, 151)]);
    }

    #[test]
    fn chunk_coverage_and_round_trip() {
        for (clen, cap, stride) in [(300, 200, 128), (50, 20, 7), (10, 10, 3), (33, 8, 8)] {
            let span = (clen / 2, clen / 2);
            let (ex, vocab) = chunking_example(clen, vec![span]);
            let chunks = chunk(&ex, &vocab, cap + 3, stride).unwrap();
            let mut covered = vec![false; clen];
            for c in &chunks {
                for i in c.window_offset..c.window_offset + c.window_len {
                    covered[i] = true;
                }
                // span round-trip: remapped tokens equal the original answer
                for &(s, e) in &c.spans {
                    let text = ex.context[c.window_offset + s..=c.window_offset + e].join(" ");
                    assert!(ex.answers.contains(&text));
                }
            }
            assert!(covered.iter().all(|&c| c), "gap in coverage {clen}/{cap}/{stride}");
        }
    }

    #[test]
    fn chunk_question_too_long() {
        let (mut ex, vocab) = chunking_example(5, vec![(0, 0)]);
        ex.question = (0..20).map(|i| format!("q{i}")).collect();
        assert!(chunk(&ex, &vocab, 16, 4).is_err());
    }

    #[test]
    fn sampler_single_dataset_uniform() {
        let mut s = BatchSampler::new(vec![10], 0).unwrap();
        for (d, i) in s.next_batch(100) {
            assert_eq!(d, 0);
            assert!(i < 10);
        }
    }

    #[test]
    fn sampler_two_datasets_binomial() {
        let mut s = BatchSampler::new(vec![5, 5], 1).unwrap();
        let n = 10_000;
        let count0 = s
            .next_batch(n)
            .iter()
            .filter(|(d, _)| *d == 0)
            .count() as f64;
        // 5 sigma of Binomial(n, 0.5)
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((count0 - n as f64 / 2.0).abs() < 5.0 * sigma, "count0 = {count0}");
    }

    #[test]
    fn sampler_deterministic_and_validates() {
        let batches = |seed| {
            let mut s = BatchSampler::new(vec![3, 7], seed).unwrap();
            (0..5).map(|_| s.next_batch(4)).collect::<Vec<_>>()
        };
        assert_eq!(batches(7), batches(7));
        assert!(BatchSampler::new(vec![], 0).is_err());
        assert!(BatchSampler::new(vec![3, 0], 0).is_err());
    }

    #[test]
    fn dynamic_weights_cases() {
        // equal gaps -> uniform
        let w = dynamic_weights(&[50.0, 60.0], &[70.0, 80.0], 0.1).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        // gaps [10, 5, 0] with floor 0.1 -> normalize (10, 5, 0.1)
        let w = dynamic_weights(&[60.0, 65.0, 70.0], &[70.0, 70.0, 70.0], 0.1).unwrap();
        let total = 15.1;
        for (got, want) in w.iter().zip([10.0 / total, 5.0 / total, 0.1 / total]) {
            assert!((got - want).abs() < 1e-4, "{w:?}");
        }
        // all gaps <= 0 clamp to the floor -> uniform
        let w = dynamic_weights(&[90.0, 95.0], &[70.0, 80.0], 0.1).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        // length mismatch
        assert!(dynamic_weights(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }
}
