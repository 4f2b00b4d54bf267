//! The training runner: config in, checkpoint + records out.
//!
//! One call runs `steps` optimizer steps in the configured execution mode,
//! evaluating every `eval_interval` steps (and always after the last
//! step), streaming one [`StepRecord`] per step so a mid-run abort leaves
//! a valid partial records file.
//!
//! Determinism: the run seed fixes model initialization and the
//! perturbation-noise schedule (through domain-separated mixes); the task
//! seed fixes the data. Batches are taken cyclically from the train split
//! — step `t` always sees the same rows — so two runs of the same config
//! and seed produce byte-identical records, and every execution mode sees
//! the identical step-`t` batch (which is what makes cross-mode trajectory
//! comparisons exact rather than statistical).

use crate::checkpoint;
use crate::dual::DualState;
use crate::error::{Error, Result};
use crate::model::{forward_passes, Batch, Model};
use crate::parallel::{master_step, sequential_model_step, ParallelMode};
use crate::records::{timing_sidecar_path, RecordWriter, StepRecord, TimingRecord};
use crate::rng::mix;
use crate::runcfg::{RunConfig, RunMode};
use crate::tasks::{self, Dataset};
use crate::zo::{SeedSchedule, ZoStep};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Domain tag separating the noise schedule from model-init draws.
const NOISE_TAG: u64 = 0x6E6F_6973_65; // "noise"

/// Rows per evaluation forward pass.
const EVAL_BATCH: usize = 16;

/// What a finished (or zero-step) run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    /// Highest eval accuracy seen at any evaluation point.
    pub best_eval_accuracy: Option<f64>,
    pub checkpoint_path: PathBuf,
    pub records_path: PathBuf,
}

/// Mean loss and exact-match accuracy over the eval split.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in dataset.eval_batches(EVAL_BATCH)? {
        let (losses, preds) = model.forward_eval(&batch, None)?;
        for (r, &p) in preds.iter().enumerate() {
            loss_sum += losses.data()[r] as f64;
            correct += (p == batch.label(r)) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("eval split is empty".into()));
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

/// Run training per `cfg`, writing the checkpoint, the step records, the
/// timing sidecar, and an echo of the effective config into `out_dir`.
/// `seed_override` replaces the config's run seed (the task seed is part
/// of the task definition and is not affected).
pub fn train(cfg: &RunConfig, out_dir: &Path, seed_override: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_seed = seed_override.unwrap_or(cfg.seed);
    std::fs::create_dir_all(out_dir)?;

    let mut effective = cfg.clone();
    effective.seed = run_seed;
    std::fs::write(out_dir.join("config.toml"), effective.to_toml_string()?)?;

    let mut model = Model::init(&cfg.model, run_seed)?;
    if cfg.train.quantize {
        model.quantize_weights()?;
    }
    let dataset = tasks::generate(&cfg.task)?;
    let set = model.lora_b_param_set();
    let schedule = SeedSchedule::new(mix(run_seed, NOISE_TAG));
    let t = &cfg.train;

    let records_path = out_dir.join(&cfg.paths.records);
    let checkpoint_path = out_dir.join(&cfg.paths.checkpoint);
    let mut records = RecordWriter::create(&records_path, "train_steps")?;
    let mut timings =
        RecordWriter::create(&timing_sidecar_path(&records_path), "train_steps.timing")?;

    let mut dual = match t.mode {
        RunMode::Dual => Some(DualState::new(&model, t.q, t.eps, t.lr, &schedule)?),
        _ => None,
    };

    let mut final_eval: Option<(f64, f64)> = None;
    let mut best_acc: Option<f64> = None;

    for step in 0..t.steps {
        let batch = dataset.train_batch(step, t.batch_size, None)?;
        let started = Instant::now();
        let fp_before = forward_passes();
        crate::alloc::reset_peak();

        let zo = run_one_step(&mut model, &set, &batch, t, &schedule, step, dual.as_mut())?;

        let peak_bytes = crate::alloc::stats().peak_bytes;
        let fp_delta = forward_passes() - fp_before;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        let last = step + 1 == t.steps;
        let mut eval_loss = None;
        let mut eval_accuracy = None;
        if (step + 1) % t.eval_interval == 0 || last {
            if let Some(state) = dual.as_ref() {
                state.finalize(&mut model)?;
            }
            let (l, a) = evaluate(&model, &dataset)?;
            eval_loss = Some(l);
            eval_accuracy = Some(a);
            final_eval = Some((l, a));
            best_acc = Some(best_acc.map_or(a, |b: f64| b.max(a)));
        }

        records.write(&StepRecord {
            step,
            seeds: zo.seeds.clone(),
            loss_plus: zo.loss_plus.clone(),
            loss_minus: zo.loss_minus.clone(),
            projected_grads: zo.projected_grads.clone(),
            forward_passes: fp_delta,
            peak_bytes,
            eval_loss,
            eval_accuracy,
        })?;
        timings.write(&TimingRecord::new("train", step, wall_ms.max(1e-6))?)?;
    }

    if let Some(state) = dual.as_ref() {
        state.finalize(&mut model)?;
    }
    checkpoint::save(&model, &checkpoint_path)?;

    Ok(TrainOutcome {
        steps_run: t.steps,
        final_eval_loss: final_eval.map(|(l, _)| l),
        final_eval_accuracy: final_eval.map(|(_, a)| a),
        best_eval_accuracy: best_acc,
        checkpoint_path,
        records_path,
    })
}

fn run_one_step(
    model: &mut Model,
    set: &crate::zo::ParamSet,
    batch: &Batch,
    t: &crate::runcfg::TrainConfig,
    schedule: &SeedSchedule,
    step: u64,
    dual: Option<&mut DualState>,
) -> Result<ZoStep> {
    match t.mode {
        RunMode::Sequential => {
            sequential_model_step(model, set, batch, t.q, t.eps, t.lr, schedule, step)
        }
        RunMode::Outer => {
            master_step(model, set, batch, t.q, t.eps, t.lr, schedule, step, ParallelMode::Outer)
        }
        RunMode::Inner => {
            master_step(model, set, batch, t.q, t.eps, t.lr, schedule, step, ParallelMode::Inner)
        }
        RunMode::Dual => {
            let state = dual.expect("dual state exists in dual mode");
            debug_assert_eq!(state.next_step(), step);
            state.step(model, batch, schedule)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraTarget, ModelConfig};
    use crate::records::read_records;
    use crate::runcfg::{PathsConfig, TrainConfig};
    use crate::tasks::{TaskKind, TaskSpec};
    use crate::zo::ParamStore;

    fn small_cfg(mode: RunMode, steps: u64) -> RunConfig {
        RunConfig {
            seed: 11,
            model: ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                vocab_size: 16,
                max_seq_len: 32,
                lora_rank: 4,
                lora_alpha: 8.0,
                lora_targets: vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpDown],
            },
            task: TaskSpec {
                kind: TaskKind::MajorityToken,
                vocab_size: 16,
                min_len: 4,
                max_len: 8,
                n_train: 64,
                n_eval: 32,
                seed: 3,
            },
            train: TrainConfig {
                steps,
                eval_interval: 4,
                lr: 0.05,
                eps: 0.01,
                q: 2,
                batch_size: 2,
                mode,
                quantize: false,
                effective_batch: None,
            },
            paths: PathsConfig::default(),
            bench: None,
        }
    }

    #[test]
    fn zero_steps_leaves_checkpoint_at_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(RunMode::Sequential, 0);
        let out = train(&cfg, dir.path(), None).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.final_eval_loss.is_none());
        let saved = checkpoint::load(&out.checkpoint_path).unwrap();
        let init = Model::init(&cfg.model, cfg.seed).unwrap();
        for name in init.full_param_names().unwrap() {
            assert_eq!(
                saved.param(&name).unwrap().data(),
                init.param(&name).unwrap().data(),
                "{name}"
            );
        }
        let recs: Vec<StepRecord> = read_records(&out.records_path, "train_steps").unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn same_config_and_seed_reproduce_records_byte_for_byte() {
        let cfg = small_cfg(RunMode::Inner, 6);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = train(&cfg, d1.path(), None).unwrap();
        let o2 = train(&cfg, d2.path(), None).unwrap();
        let b1 = std::fs::read(&o1.records_path).unwrap();
        let b2 = std::fs::read(&o2.records_path).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(
            std::fs::read(&o1.checkpoint_path).unwrap(),
            std::fs::read(&o2.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn all_modes_run_and_record_expected_forward_counts() {
        for (mode, expected) in [
            (RunMode::Sequential, 4), // 2q with q=2
            (RunMode::Outer, 2),
            (RunMode::Inner, 1),
            (RunMode::Dual, 1),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_cfg(mode, 5);
            let out = train(&cfg, dir.path(), None).unwrap();
            let recs: Vec<StepRecord> = read_records(&out.records_path, "train_steps").unwrap();
            assert_eq!(recs.len(), 5);
            for r in &recs {
                assert_eq!(r.forward_passes, expected, "{mode:?}");
                assert_eq!(r.seeds.len(), 2);
                assert!(r.loss_plus.iter().all(|l| l.is_finite()));
            }
            // eval_interval=4 and final step: evals at steps 3 and 4 (0-based).
            assert!(recs[3].eval_loss.is_some());
            assert!(recs[4].eval_loss.is_some());
            assert!(recs[0].eval_loss.is_none());
            assert!(out.final_eval_accuracy.is_some());
        }
    }

    #[test]
    fn seed_override_changes_the_run_and_is_echoed() {
        let cfg = small_cfg(RunMode::Outer, 3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = train(&cfg, d1.path(), None).unwrap();
        let o2 = train(&cfg, d2.path(), Some(99)).unwrap();
        assert_ne!(
            std::fs::read(&o1.records_path).unwrap(),
            std::fs::read(&o2.records_path).unwrap()
        );
        let echo = std::fs::read_to_string(d2.path().join("config.toml")).unwrap();
        let back = RunConfig::from_toml_str(&echo).unwrap();
        assert_eq!(back.seed, 99);
    }

    #[test]
    fn training_reduces_loss_on_the_small_task() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(RunMode::Inner, 60);
        cfg.train.q = 4;
        cfg.train.batch_size = 4;
        cfg.train.eval_interval = 100; // final eval only
        let out = train(&cfg, dir.path(), None).unwrap();
        let recs: Vec<StepRecord> = read_records(&out.records_path, "train_steps").unwrap();
        let first_losses: f64 =
            recs[..5].iter().map(|r| (r.loss_plus[0] + r.loss_minus[0]) / 2.0).sum::<f64>() / 5.0;
        let last_losses: f64 = recs[recs.len() - 5..]
            .iter()
            .map(|r| (r.loss_plus[0] + r.loss_minus[0]) / 2.0)
            .sum::<f64>()
            / 5.0;
        assert!(
            last_losses < first_losses,
            "loss did not decrease: {first_losses} -> {last_losses}"
        );
    }

    #[test]
    fn quantized_training_runs_and_records_match_structurally() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(RunMode::Inner, 3);
        cfg.train.quantize = true;
        let out = train(&cfg, dir.path(), None).unwrap();
        let recs: Vec<StepRecord> = read_records(&out.records_path, "train_steps").unwrap();
        assert_eq!(recs.len(), 3);
        // Checkpoint reloads and evaluates.
        let m = checkpoint::load(&out.checkpoint_path).unwrap();
        let ds = tasks::generate(&cfg.task).unwrap();
        let (l, _) = evaluate(&m, &ds).unwrap();
        assert!(l.is_finite());
    }
}
