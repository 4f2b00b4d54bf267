//! Synthetic token-sequence tasks with controllable difficulty.
//!
//! Each task emits classification-shaped examples: a token sequence whose
//! *last position* carries the supervision, with the label being a single
//! vocabulary token — so fine-tuning is ordinary next-token loss at one
//! position per row, and no real tokenizer or corpus is needed.
//!
//! Token space: id 0 is reserved for padding and id 1 stays unused, so
//! content tokens start at 2. Train and eval splits are generated from
//! disjoint seeded streams: they cannot overlap by construction (they can
//! coincide only as much as two independent draws coincide).
//!
//! Tasks, easiest to hardest for a small causal model:
//!
//! * **majority token** — tokens from a 4-letter alphabet; one letter holds
//!   a strict majority; the label is that letter. One attention pass that
//!   averages the sequence already exposes the answer, so this is the
//!   canonical end-to-end training target.
//! * **key-value recall** — `(key, value)` pairs followed by a repeated
//!   query key; the label is that key's value. Needs position-aware
//!   retrieval, not just averaging.
//! * **parity** — bits from `{0,1}` (tokens 2/3); the label token encodes
//!   the XOR of all bits. Deliberately hard for fixed-depth attention;
//!   included as a difficulty ceiling, not as an acceptance target.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{mix, RngStream};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Majority-token alphabet size (tokens `2 .. 2+ALPHABET`).
pub const ALPHABET: usize = 4;
/// Fraction of positions guaranteed to hold the majority token.
pub const MAJORITY_FRACTION: f64 = 0.7;
/// Key-value recall: number of distinct keys and values.
pub const KV_KEYS: usize = 4;
pub const KV_VALUES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MajorityToken,
    KeyValueRecall,
    Parity,
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Sequence length bounds (inclusive); lengths are drawn uniformly.
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let min_vocab = match self.kind {
            TaskKind::MajorityToken => 2 + ALPHABET,
            TaskKind::KeyValueRecall => 2 + KV_KEYS + KV_VALUES,
            TaskKind::Parity => 2 + 4,
        };
        if self.vocab_size < min_vocab {
            return fail(format!("task needs vocab_size >= {min_vocab}, got {}", self.vocab_size));
        }
        let min_min = match self.kind {
            TaskKind::MajorityToken => 3,
            TaskKind::KeyValueRecall => 3,
            TaskKind::Parity => 1,
        };
        if self.min_len < min_min || self.min_len > self.max_len {
            return fail(format!(
                "length bounds must satisfy {min_min} <= min_len <= max_len, got [{}, {}]",
                self.min_len, self.max_len
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return fail("n_train and n_eval must be positive".into());
        }
        Ok(())
    }
}

/// One example: a token row and its label token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

/// A generated dataset with disjoint train/eval splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: TaskSpec,
    train: Vec<Example>,
    eval: Vec<Example>,
}

const TRAIN_TAG: u64 = 0x7472_61696E; // "train"
const EVAL_TAG: u64 = 0x6576_616C; // "eval"

/// Generate a dataset deterministically from its spec.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train_stream = RngStream::new(mix(spec.seed, TRAIN_TAG));
    let mut eval_stream = RngStream::new(mix(spec.seed, EVAL_TAG));
    let train = (0..spec.n_train).map(|_| one_example(spec, &mut train_stream)).collect();
    let eval = (0..spec.n_eval).map(|_| one_example(spec, &mut eval_stream)).collect();
    Ok(Dataset { spec: spec.clone(), train, eval })
}

fn one_example(spec: &TaskSpec, stream: &mut RngStream) -> Example {
    let span = (spec.max_len - spec.min_len + 1) as u64;
    let len = spec.min_len + stream.next_below(span) as usize;
    match spec.kind {
        TaskKind::MajorityToken => majority_example(len, stream),
        TaskKind::KeyValueRecall => kv_example(len, stream),
        TaskKind::Parity => parity_example(len, stream),
    }
}

fn majority_example(len: usize, stream: &mut RngStream) -> Example {
    let majority = 2 + stream.next_below(ALPHABET as u64) as u32;
    // Enough copies for the guaranteed fraction, and always a strict
    // majority regardless of rounding.
    let copies = ((len as f64 * MAJORITY_FRACTION).ceil() as usize).max(len / 2 + 1).min(len);
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..copies {
        tokens.push(majority);
    }
    for _ in copies..len {
        // Uniform over the other letters.
        let mut t = 2 + stream.next_below((ALPHABET - 1) as u64) as u32;
        if t >= majority {
            t += 1;
        }
        tokens.push(t);
    }
    // Fisher–Yates with the same stream keeps generation one-pass
    // deterministic.
    for i in (1..len).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        tokens.swap(i, j);
    }
    Example { tokens, label: majority }
}

fn kv_example(len: usize, stream: &mut RngStream) -> Example {
    // len positions hold pairs plus one trailing query token.
    let pairs = ((len - 1) / 2).clamp(1, KV_KEYS);
    // Distinct keys via a partial shuffle of the key alphabet.
    let mut keys: Vec<u32> = (0..KV_KEYS as u32).map(|k| 2 + k).collect();
    for i in 0..pairs {
        let j = i + stream.next_below((KV_KEYS - i) as u64) as usize;
        keys.swap(i, j);
    }
    let mut tokens = Vec::with_capacity(2 * pairs + 1);
    let mut values = Vec::with_capacity(pairs);
    for &key in &keys[..pairs] {
        let value = (2 + KV_KEYS) as u32 + stream.next_below(KV_VALUES as u64) as u32;
        tokens.push(key);
        tokens.push(value);
        values.push(value);
    }
    let pick = stream.next_below(pairs as u64) as usize;
    tokens.push(keys[pick]);
    Example { tokens, label: values[pick] }
}

fn parity_example(len: usize, stream: &mut RngStream) -> Example {
    let mut ones = 0u32;
    let tokens: Vec<u32> = (0..len)
        .map(|_| {
            let bit = stream.next_below(2) as u32;
            ones += bit;
            2 + bit
        })
        .collect();
    Example { tokens, label: 4 + (ones % 2) }
}

impl Dataset {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn train(&self) -> &[Example] {
        &self.train
    }

    pub fn eval(&self) -> &[Example] {
        &self.eval
    }

    /// The training batch for a step: `b` examples taken cyclically from
    /// the train split, padded to the longest row in the batch (or to
    /// `pad_to`).
    pub fn train_batch(&self, step: u64, b: usize, pad_to: Option<usize>) -> Result<Batch> {
        if b == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let n = self.train.len();
        let start = (step as usize).wrapping_mul(b);
        let rows: Vec<Vec<u32>> =
            (0..b).map(|i| self.train[(start + i) % n].tokens.clone()).collect();
        let labels: Vec<u32> = (0..b).map(|i| self.train[(start + i) % n].label).collect();
        Batch::new(&rows, &labels, pad_to)
    }

    /// All eval examples as batches of (up to) `b` rows.
    pub fn eval_batches(&self, b: usize) -> Result<Vec<Batch>> {
        batches(&self.eval, b, None, 1)
    }
}

/// Chunk examples into batches of `b` rows (last batch may be smaller),
/// each padded to its own longest row unless `pad_to` fixes the width, then
/// duplicated group-wise `duplicate_factor` times.
pub fn batches(
    examples: &[Example],
    b: usize,
    pad_to: Option<usize>,
    duplicate_factor: usize,
) -> Result<Vec<Batch>> {
    if b == 0 || duplicate_factor == 0 {
        return Err(Error::Config("batch size and duplicate factor must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Data("cannot batch an empty example list".into()));
    }
    examples
        .chunks(b)
        .map(|chunk| {
            let rows: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let labels: Vec<u32> = chunk.iter().map(|e| e.label).collect();
            let batch = Batch::new(&rows, &labels, pad_to)?;
            Ok(if duplicate_factor > 1 { batch.duplicate(duplicate_factor) } else { batch })
        })
        .collect()
}

/// Write examples as line-delimited JSON (`{"tokens":[...],"label":n}`).
pub fn export_examples(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        let line = serde_json::to_string(e)
            .map_err(|err| Error::Data(format!("example serialization failed: {err}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read examples written by [`export_examples`].
pub fn import_examples(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("line {}: bad example record: {err}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec { kind, vocab_size: 32, min_len: 5, max_len: 12, n_train: 64, n_eval: 16, seed: 7 }
    }

    #[test]
    fn same_seed_regenerates_identical_datasets() {
        for kind in [TaskKind::MajorityToken, TaskKind::KeyValueRecall, TaskKind::Parity] {
            let a = generate(&spec(kind)).unwrap();
            let b = generate(&spec(kind)).unwrap();
            assert_eq!(a.train(), b.train());
            assert_eq!(a.eval(), b.eval());
        }
    }

    #[test]
    fn majority_label_is_the_strict_majority() {
        let ds = generate(&TaskSpec { n_train: 500, ..spec(TaskKind::MajorityToken) }).unwrap();
        for e in ds.train() {
            let count = e.tokens.iter().filter(|&&t| t == e.label).count();
            assert!(2 * count > e.tokens.len(), "{:?}", e);
            for &t in &e.tokens {
                assert!((2..2 + ALPHABET as u32).contains(&t));
            }
        }
    }

    #[test]
    fn majority_labels_are_roughly_balanced() {
        let ds = generate(&TaskSpec { n_train: 10_000, ..spec(TaskKind::MajorityToken) }).unwrap();
        let mut counts = [0usize; ALPHABET];
        for e in ds.train() {
            counts[(e.label - 2) as usize] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 0.25).abs() < 0.05 * 0.25 + 0.02, "class fraction {frac}");
        }
    }

    #[test]
    fn kv_recall_query_resolves_to_its_value() {
        let ds = generate(&spec(TaskKind::KeyValueRecall)).unwrap();
        for e in ds.train() {
            let query = *e.tokens.last().unwrap();
            let pairs = (e.tokens.len() - 1) / 2;
            let mut found = None;
            for p in 0..pairs {
                if e.tokens[2 * p] == query {
                    found = Some(e.tokens[2 * p + 1]);
                }
            }
            assert_eq!(found, Some(e.label), "{:?}", e);
            // Keys are distinct, so the lookup is unambiguous.
            let mut keys: Vec<u32> = (0..pairs).map(|p| e.tokens[2 * p]).collect();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), pairs);
        }
    }

    #[test]
    fn parity_label_encodes_the_xor() {
        let ds = generate(&spec(TaskKind::Parity)).unwrap();
        for e in ds.train() {
            let ones = e.tokens.iter().filter(|&&t| t == 3).count() as u32;
            assert_eq!(e.label, 4 + ones % 2);
        }
    }

    #[test]
    fn train_and_eval_draws_differ() {
        let ds = generate(&spec(TaskKind::MajorityToken)).unwrap();
        assert_ne!(ds.train()[..16], ds.eval()[..]);
    }

    #[test]
    fn wider_batches_pad_more_on_heterogeneous_lengths() {
        let ds = generate(&TaskSpec {
            min_len: 4,
            max_len: 16,
            n_train: 256,
            ..spec(TaskKind::MajorityToken)
        })
        .unwrap();
        let mean_frac = |b: usize| {
            let bs = batches(ds.train(), b, None, 1).unwrap();
            bs.iter().map(|x| x.padding_fraction()).sum::<f64>() / bs.len() as f64
        };
        assert!(mean_frac(16) > mean_frac(4));
    }

    #[test]
    fn equal_lengths_pad_nothing() {
        let ds = generate(&TaskSpec { min_len: 8, max_len: 8, ..spec(TaskKind::MajorityToken) })
            .unwrap();
        for b in batches(ds.train(), 8, None, 1).unwrap() {
            assert_eq!(b.padding_fraction(), 0.0);
        }
    }

    #[test]
    fn duplication_repeats_each_group_in_order() {
        let ds = generate(&spec(TaskKind::MajorityToken)).unwrap();
        let plain = batches(&ds.train()[..4], 4, None, 1).unwrap().remove(0);
        let dup = batches(&ds.train()[..4], 4, None, 3).unwrap().remove(0);
        assert_eq!(dup.n_rows(), 12);
        for g in 0..3 {
            for r in 0..4 {
                assert_eq!(dup.label(g * 4 + r), plain.label(r));
                assert_eq!(dup.row_len(g * 4 + r), plain.row_len(r));
            }
        }
    }

    #[test]
    fn export_import_roundtrip_is_identity() {
        let ds = generate(&spec(TaskKind::KeyValueRecall)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        export_examples(ds.train(), &path).unwrap();
        let back = import_examples(&path).unwrap();
        assert_eq!(ds.train(), &back[..]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(TaskKind::MajorityToken);
        s.vocab_size = 4;
        assert!(generate(&s).is_err());
        let mut s = spec(TaskKind::KeyValueRecall);
        s.min_len = 2;
        assert!(generate(&s).is_err());
        let mut s = spec(TaskKind::Parity);
        s.n_eval = 0;
        assert!(generate(&s).is_err());
    }
}
