//! Run configuration: one TOML file describes a model, a task, a training
//! recipe, and (optionally) a benchmark grid.
//!
//! The same file drives every CLI subcommand, and serialization is a
//! round-trip identity: `parse(serialize(cfg)) == cfg`, so a config echoed
//! into a run directory re-runs the run.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How gradient-estimate probes are executed each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// `2q` forward passes, perturbing parameters in place.
    Sequential,
    /// Two forward passes over a `q`-way duplicated batch (one per sign).
    Outer,
    /// One forward pass over a `2q`-way duplicated batch.
    Inner,
    /// One forward pass per step over a standing perturbed stack.
    Dual,
}

impl RunMode {
    pub const ALL: [RunMode; 4] =
        [RunMode::Sequential, RunMode::Outer, RunMode::Inner, RunMode::Dual];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Sequential => "sequential",
            RunMode::Outer => "outer",
            RunMode::Inner => "inner",
            RunMode::Dual => "dual",
        }
    }
}

/// What a benchmark cell runs. `Infer` is the plain-forward baseline used
/// for memory and throughput comparisons; the rest are training steps in
/// the corresponding [`RunMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Infer,
    Sequential,
    Outer,
    Inner,
    Dual,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Infer => "infer",
            BenchMode::Sequential => "sequential",
            BenchMode::Outer => "outer",
            BenchMode::Inner => "inner",
            BenchMode::Dual => "dual",
        }
    }
}

fn default_eval_interval() -> u64 {
    100
}

/// Training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Evaluate every this many steps (and always after the last step).
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    pub lr: f32,
    pub eps: f32,
    /// Perturbation queries averaged per step.
    pub q: usize,
    pub batch_size: usize,
    pub mode: RunMode,
    /// Quantize frozen projection weights to int8 before training.
    #[serde(default)]
    pub quantize: bool,
    /// Optional declared examples-per-forward budget; must equal
    /// `q * batch_size` when present (a cross-check for grid scripts that
    /// trade `q` against `batch_size` at fixed cost).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_batch: Option<usize>,
}

fn default_bench_steps() -> usize {
    20
}
fn default_bench_warmup() -> usize {
    3
}

/// Benchmark grid: the sweep runs the cartesian product of sequence
/// lengths, batch sizes, query counts, and modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub qs: Vec<usize>,
    pub modes: Vec<BenchMode>,
    #[serde(default)]
    pub quantize: bool,
    /// Timed repetitions per cell (median is reported).
    #[serde(default = "default_bench_steps")]
    pub steps: usize,
    /// Untimed repetitions before measurement starts.
    #[serde(default = "default_bench_warmup")]
    pub warmup: usize,
    /// Simulated allocation ceiling; a cell that would exceed it is
    /// reported as failed instead of aborting the sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_limit_mb: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![64, 128, 256],
            batch_sizes: vec![1, 8, 16],
            qs: vec![4],
            modes: vec![BenchMode::Infer, BenchMode::Sequential, BenchMode::Inner],
            quantize: false,
            steps: default_bench_steps(),
            warmup: default_bench_warmup(),
            mem_limit_mb: None,
        }
    }
}

/// Output file names, resolved relative to the run's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    #[serde(default = "default_checkpoint_path")]
    pub checkpoint: String,
    #[serde(default = "default_records_path")]
    pub records: String,
}

fn default_checkpoint_path() -> String {
    "model.ckpt".into()
}
fn default_records_path() -> String {
    "steps.jsonl".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { checkpoint: default_checkpoint_path(), records: default_records_path() }
    }
}

/// Everything one run needs, parsed from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; model init and the noise schedule derive from it
    /// through domain-separated mixes. Task data has its own seed in
    /// [`TaskSpec`], so overriding the run seed never changes the dataset.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let t = &self.train;
        if t.q == 0 || t.batch_size == 0 {
            return Err(Error::Config("q and batch_size must be at least 1".into()));
        }
        if !(t.eps > 0.0) || !t.eps.is_finite() {
            return Err(Error::Config(format!("eps must be positive and finite, got {}", t.eps)));
        }
        if !t.lr.is_finite() || t.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", t.lr)));
        }
        if t.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if let Some(e) = t.effective_batch {
            if e != t.q * t.batch_size {
                return Err(Error::Config(format!(
                    "effective_batch {} does not equal q * batch_size = {}",
                    e,
                    t.q * t.batch_size
                )));
            }
        }
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocab_size {} exceeds model vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.max_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task max_len {} does not fit model max_seq_len {}",
                self.task.max_len, self.model.max_seq_len
            )));
        }
        if self.paths.checkpoint.is_empty() || self.paths.records.is_empty() {
            return Err(Error::Config("paths.checkpoint and paths.records must be set".into()));
        }
        if let Some(b) = &self.bench {
            if b.seq_lens.is_empty()
                || b.batch_sizes.is_empty()
                || b.qs.is_empty()
                || b.modes.is_empty()
            {
                return Err(Error::Config("bench grid axes must be non-empty".into()));
            }
            if b.steps == 0 {
                return Err(Error::Config("bench steps must be at least 1".into()));
            }
            if b.qs.iter().any(|&q| q == 0) || b.batch_sizes.iter().any(|&x| x == 0) {
                return Err(Error::Config("bench qs and batch sizes must be at least 1".into()));
            }
            if b.seq_lens.iter().any(|&s| s > self.model.max_seq_len) {
                return Err(Error::Config("bench seq_lens exceed model max_seq_len".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::LoraTarget;
    use crate::tasks::TaskKind;

    pub(crate) fn sample() -> RunConfig {
        RunConfig {
            seed: 42,
            model: ModelConfig {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                vocab_size: 32,
                max_seq_len: 256,
                lora_rank: 8,
                lora_alpha: 16.0,
                lora_targets: vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpDown],
            },
            task: TaskSpec {
                kind: TaskKind::MajorityToken,
                vocab_size: 32,
                min_len: 6,
                max_len: 12,
                n_train: 512,
                n_eval: 128,
                seed: 7,
            },
            train: TrainConfig {
                steps: 50,
                eval_interval: 25,
                lr: 0.05,
                eps: 0.01,
                q: 4,
                batch_size: 4,
                mode: RunMode::Inner,
                quantize: false,
                effective_batch: Some(16),
            },
            paths: PathsConfig::default(),
            bench: Some(BenchConfig::default()),
        }
    }

    #[test]
    fn toml_roundtrip_is_identity() {
        let cfg = sample();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // And the serialized form itself is stable.
        assert_eq!(text, back.to_toml_string().unwrap());
    }

    #[test]
    fn eval_interval_defaults_to_100() {
        let mut cfg = sample();
        cfg.bench = None;
        let mut text = cfg.to_toml_string().unwrap();
        text = text.replace("eval_interval = 25\n", "");
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.train.eval_interval, 100);
    }

    #[test]
    fn effective_batch_mismatch_is_rejected() {
        let mut cfg = sample();
        cfg.train.effective_batch = Some(15);
        let text = toml::to_string_pretty(&cfg).unwrap();
        match RunConfig::from_toml_str(&text) {
            Err(Error::Config(m)) => assert!(m.contains("effective_batch")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn cross_field_limits_are_enforced() {
        let mut cfg = sample();
        cfg.task.vocab_size = 64;
        assert!(cfg.validate().is_err());

        let mut cfg = sample();
        cfg.task.max_len = 257;
        assert!(cfg.validate().is_err());

        let mut cfg = sample();
        cfg.bench.as_mut().unwrap().seq_lens = vec![1024];
        assert!(cfg.validate().is_err());

        let mut cfg = sample();
        cfg.train.eps = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names_parse_as_snake_case() {
        let cfg = sample();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("mode = \"inner\""));
        for (s, m) in [
            ("sequential", RunMode::Sequential),
            ("outer", RunMode::Outer),
            ("inner", RunMode::Inner),
            ("dual", RunMode::Dual),
        ] {
            let replaced = text.replace("mode = \"inner\"", &format!("mode = \"{s}\""));
            assert_eq!(RunConfig::from_toml_str(&replaced).unwrap().train.mode, m);
        }
    }
}
