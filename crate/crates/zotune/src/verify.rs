//! Self-verification: a fixed battery of named invariant checks that a
//! fresh checkout must pass, runnable from the CLI and rerunnable
//! byte-identically.
//!
//! Each check exercises one contract the rest of the system leans on —
//! parameter restoration after probing, equivalence of the probe layouts,
//! stateful-mode trajectory tracking, forward-pass and dequantization
//! accounting, and the estimator's statistical behavior at small sample
//! sizes. Results carry deterministic detail strings (seeded computations
//! only, no wall times), so two runs of the same config produce identical
//! reports.
//!
//! [`Fault`] deliberately mis-wires one code path so tests can confirm the
//! battery actually detects the defects it claims to detect.

use crate::error::Result;
use crate::model::Model;
use crate::oracle;
use crate::parallel::{master_step, mean_loss, sequential_model_step, ParallelMode};
use crate::records::RecordWriter;
use crate::rng::mix;
use crate::runcfg::RunConfig;
use crate::tasks;
use crate::zo::{ParamSet, SeedSchedule, VecStore};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Deliberate defect injections for mutation-testing the battery itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Use a slightly wrong ε in the two-pass reference path of the
    /// combined-probe equivalence check.
    WrongEpsInCombined,
}

impl Fault {
    pub fn from_name(name: &str) -> Option<Fault> {
        match name {
            "wrong_eps" => Some(Fault::WrongEpsInCombined),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

fn result(id: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult { id: id.to_string(), pass, detail }
}

struct Ctx {
    model: Model,
    set: ParamSet,
    batch: crate::model::Batch,
    schedule: SeedSchedule,
    eps: f32,
    q: usize,
}

fn context(cfg: &RunConfig) -> Result<Ctx> {
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let set = model.lora_b_param_set();
    let dataset = tasks::generate(&cfg.task)?;
    let batch = dataset.train_batch(0, cfg.train.batch_size.min(4), None)?;
    let schedule = SeedSchedule::new(mix(cfg.seed, 0x7665_7269_6679)); // "verify"
                                                                       // Warm the adapters off zero so probes see non-trivial curvature.
    for step in 0..2 {
        sequential_model_step(&mut model, &set, &batch, 1, cfg.train.eps, 0.5, &schedule, step)?;
    }
    Ok(Ctx { model, set, batch, schedule, eps: cfg.train.eps, q: cfg.train.q.max(2) })
}

/// Run the whole battery. `fault` wires in a deliberate defect (tests
/// only); `None` is the production path.
pub fn run_checks(cfg: &RunConfig, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut ctx = context(cfg)?;
    out.push(check_restoration(&mut ctx)?);
    out.push(check_combined_vs_two_pass(&mut ctx, fault)?);
    out.push(check_stacked_vs_probes(&mut ctx)?);
    out.push(check_dual_tracks_master(cfg)?);
    out.push(check_forward_counters(cfg)?);
    out.push(check_estimator_unbiasedness()?);
    out.push(check_variance_scaling()?);
    out.push(check_quant_counters(cfg)?);
    out.push(check_quant_loss_drift(cfg)?);
    Ok(out)
}

/// Probing walks the parameters in place (+ε, −2ε, +ε); after a full
/// probe pass every parameter must be back within restoration tolerance.
fn check_restoration(ctx: &mut Ctx) -> Result<CheckResult> {
    let before = ctx.set.flatten(&ctx.model);
    sequential_model_step(
        &mut ctx.model,
        &ctx.set,
        &ctx.batch,
        2,
        ctx.eps,
        0.0,
        &ctx.schedule,
        10,
    )?;
    let after = ctx.set.flatten(&ctx.model);
    let mut worst = 0.0f64;
    for (&a, &b) in before.iter().zip(&after) {
        let tol = 1e-5 * (1.0 + a.abs() as f64);
        worst = worst.max((a as f64 - b as f64).abs() / tol);
    }
    // Leave the model exactly as found for the next checks.
    ctx.set.unflatten(&mut ctx.model, &before)?;
    Ok(result(
        "seed-trick-restoration",
        worst <= 1.0,
        format!("worst |after-before| at {:.3e} of tolerance 1e-5*(1+|x|)", worst),
    ))
}

/// The combined antithetic walk (+ε, −2ε, +ε with one seed) must produce
/// the same probe losses as two independent snapshot-restored passes.
fn check_combined_vs_two_pass(ctx: &mut Ctx, fault: Option<Fault>) -> Result<CheckResult> {
    let step = sequential_model_step(
        &mut ctx.model,
        &ctx.set,
        &ctx.batch,
        2,
        ctx.eps,
        0.0,
        &ctx.schedule,
        11,
    )?;
    let oracle_eps = match fault {
        Some(Fault::WrongEpsInCombined) => ctx.eps * 1.001,
        None => ctx.eps,
    };
    let batch = &ctx.batch;
    let mut worst = 0.0f64;
    for (i, &seed) in step.seeds.iter().enumerate() {
        let (lp, lm) = oracle::exact_two_sided(
            &mut ctx.model,
            &ctx.set,
            &mut |m: &Model| mean_loss(m, batch, None),
            oracle_eps,
            seed,
        )?;
        let rp = (lp - step.loss_plus[i]).abs() / step.loss_plus[i].abs().max(1e-12);
        let rm = (lm - step.loss_minus[i]).abs() / step.loss_minus[i].abs().max(1e-12);
        worst = worst.max(rp).max(rm);
    }
    Ok(result(
        "combined-pair-vs-two-pass",
        worst <= 1e-6,
        format!("worst relative probe-loss difference {:.3e} (bound 1e-6)", worst),
    ))
}

/// Stacked execution must reproduce the snapshot-probe losses exactly.
fn check_stacked_vs_probes(ctx: &mut Ctx) -> Result<CheckResult> {
    let mut stacked = ctx.model.clone();
    let step = master_step(
        &mut stacked,
        &ctx.set,
        &ctx.batch,
        ctx.q,
        ctx.eps,
        0.0,
        &ctx.schedule,
        12,
        ParallelMode::Inner,
    )?;
    let batch = &ctx.batch;
    let mut worst = 0.0f64;
    for (i, &seed) in step.seeds.iter().enumerate() {
        let (lp, lm) = oracle::exact_two_sided(
            &mut ctx.model,
            &ctx.set,
            &mut |m: &Model| mean_loss(m, batch, None),
            ctx.eps,
            seed,
        )?;
        worst = worst
            .max((lp - step.loss_plus[i]).abs() / lp.abs().max(1e-12))
            .max((lm - step.loss_minus[i]).abs() / lm.abs().max(1e-12));
    }
    Ok(result(
        "stacked-matches-two-pass-probes",
        worst <= 1e-6,
        format!("worst relative probe-loss difference {:.3e} (bound 1e-6)", worst),
    ))
}

/// A short stateful-mode run must track the master-mode trajectory's loss
/// sequence within 1e-5 relative.
fn check_dual_tracks_master(cfg: &RunConfig) -> Result<CheckResult> {
    let steps = 8u64;
    let q = 2;
    let lr = 0.05f32;
    let dataset = tasks::generate(&cfg.task)?;
    let schedule = SeedSchedule::new(mix(cfg.seed, 0x6475_616C)); // "dual"
    let mut master = Model::init(&cfg.model, cfg.seed)?;
    let mut dual_model = Model::init(&cfg.model, cfg.seed)?;
    let set = master.lora_b_param_set();
    let mut state = crate::dual::DualState::new(&dual_model, q, cfg.train.eps, lr, &schedule)?;
    let mut worst = 0.0f64;
    for step in 0..steps {
        let batch = dataset.train_batch(step, 2, None)?;
        let a = master_step(
            &mut master,
            &set,
            &batch,
            q,
            cfg.train.eps,
            lr,
            &schedule,
            step,
            ParallelMode::Inner,
        )?;
        let b = state.step(&dual_model, &batch, &schedule)?;
        for i in 0..q {
            worst = worst
                .max((a.loss_plus[i] - b.loss_plus[i]).abs() / a.loss_plus[i].abs().max(1e-12))
                .max((a.loss_minus[i] - b.loss_minus[i]).abs() / a.loss_minus[i].abs().max(1e-12));
        }
    }
    state.finalize(&mut dual_model)?;
    Ok(result(
        "dual-tracks-master",
        worst <= 1e-5,
        format!("worst relative loss difference over {steps} steps {:.3e} (bound 1e-5)", worst),
    ))
}

/// Forward-pass counts per step: sequential 2q, two-pass 2, fused 1,
/// stateful 1.
fn check_forward_counters(cfg: &RunConfig) -> Result<CheckResult> {
    let q = 3;
    let dataset = tasks::generate(&cfg.task)?;
    let batch = dataset.train_batch(0, 2, None)?;
    let schedule = SeedSchedule::new(mix(cfg.seed, 0x636E_74)); // "cnt"
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let set = model.lora_b_param_set();
    let count = |m: &mut Model, f: &mut dyn FnMut(&mut Model) -> Result<()>| -> Result<u64> {
        let before = crate::model::forward_passes();
        f(m)?;
        Ok(crate::model::forward_passes() - before)
    };
    let seq = count(&mut model, &mut |m| {
        sequential_model_step(m, &set, &batch, q, cfg.train.eps, 0.01, &schedule, 0).map(|_| ())
    })?;
    let outer = count(&mut model, &mut |m| {
        master_step(m, &set, &batch, q, cfg.train.eps, 0.01, &schedule, 1, ParallelMode::Outer)
            .map(|_| ())
    })?;
    let inner = count(&mut model, &mut |m| {
        master_step(m, &set, &batch, q, cfg.train.eps, 0.01, &schedule, 2, ParallelMode::Inner)
            .map(|_| ())
    })?;
    let mut state = crate::dual::DualState::new(&model, q, cfg.train.eps, 0.01, &schedule)?;
    let before = crate::model::forward_passes();
    state.step(&model, &batch, &schedule)?;
    let dual = crate::model::forward_passes() - before;
    let pass = seq == 2 * q as u64 && outer == 2 && inner == 1 && dual == 1;
    Ok(result(
        "forward-pass-counters",
        pass,
        format!("sequential {seq} (want {}), two-pass {outer} (2), fused {inner} (1), stateful {dual} (1)", 2 * q),
    ))
}

/// The estimate averaged over many single-query draws must align with the
/// exact gradient (small-sample unbiasedness probe on a closed form).
fn check_estimator_unbiasedness() -> Result<CheckResult> {
    let mut store = VecStore::new((0..10).map(|i| 0.3 + 0.1 * i as f32).collect());
    let set = store.param_set();
    let mut loss = |s: &VecStore| -> Result<f64> {
        Ok(s.values().iter().map(|&v| 0.5 * v as f64 * v as f64).sum())
    };
    let report =
        oracle::bias_variance_experiment(&mut store, &set, &mut loss, &[1], 1e-3, 400, 77)?;
    let cos = report.per_q[0].cosine_vs_reference;
    Ok(result(
        "estimator-unbiasedness",
        cos > 0.95,
        format!("cosine(mean of 400 single-query estimates, exact gradient) = {:.4}", cos),
    ))
}

/// Averaging q=4 queries must shrink estimator variance by roughly 1/q.
fn check_variance_scaling() -> Result<CheckResult> {
    let mut store = VecStore::new((0..10).map(|i| 0.3 + 0.1 * i as f32).collect());
    let set = store.param_set();
    let mut loss = |s: &VecStore| -> Result<f64> {
        Ok(s.values().iter().map(|&v| 0.5 * v as f64 * v as f64).sum())
    };
    let report =
        oracle::bias_variance_experiment(&mut store, &set, &mut loss, &[1, 4], 1e-3, 600, 78)?;
    let ratio = report.per_q[1].mean_component_variance / report.per_q[0].mean_component_variance;
    Ok(result(
        "variance-scaling",
        (0.1..=0.45).contains(&ratio),
        format!(
            "Var(q=4)/Var(q=1) = {:.4} over 600 samples (want ~0.25, accept [0.10, 0.45])",
            ratio
        ),
    ))
}

/// On a quantized model, a fused step materializes each quantized matrix
/// exactly once; a sequential q=1 step (two passes) exactly twice.
fn check_quant_counters(cfg: &RunConfig) -> Result<CheckResult> {
    let dataset = tasks::generate(&cfg.task)?;
    let batch = dataset.train_batch(0, 2, None)?;
    let schedule = SeedSchedule::new(mix(cfg.seed, 0x71_6E74)); // "qnt"
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    model.quantize_weights()?;
    let n = model.quantized_matrix_count() as u64;
    let set = model.lora_b_param_set();
    let d0 = crate::quant::dequant_total();
    master_step(
        &mut model,
        &set,
        &batch,
        2,
        cfg.train.eps,
        0.01,
        &schedule,
        0,
        ParallelMode::Inner,
    )?;
    let fused = crate::quant::dequant_total() - d0;
    let d1 = crate::quant::dequant_total();
    sequential_model_step(&mut model, &set, &batch, 1, cfg.train.eps, 0.01, &schedule, 1)?;
    let sequential = crate::quant::dequant_total() - d1;
    let pass = fused == n && sequential == 2 * n;
    Ok(result(
        "quantized-dequant-counters",
        pass,
        format!("fused step {fused} (want {n}), sequential q=1 step {sequential} (want {})", 2 * n),
    ))
}

/// int8 weight quantization must not move the step-0 training loss by more
/// than 2% relative.
fn check_quant_loss_drift(cfg: &RunConfig) -> Result<CheckResult> {
    let dataset = tasks::generate(&cfg.task)?;
    let batch = dataset.train_batch(0, 4, None)?;
    let float = Model::init(&cfg.model, cfg.seed)?;
    let mut quant = Model::init(&cfg.model, cfg.seed)?;
    quant.quantize_weights()?;
    let lf = mean_loss(&float, &batch, None)?;
    let lq = mean_loss(&quant, &batch, None)?;
    let rel = (lf - lq).abs() / lf.abs().max(1e-12);
    Ok(result(
        "quantized-loss-drift",
        rel <= 0.02,
        format!("relative first-loss difference float vs int8 = {:.3e} (bound 2e-2)", rel),
    ))
}

/// Render the battery's outcome as a stable text report.
pub fn report_text(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {:<32} {}\n",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    out.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    out
}

/// Run the battery and write `verify.jsonl` + `verify_report.txt` into
/// `out_dir`. Returns the results; the caller decides the exit status.
pub fn run_and_write(
    cfg: &RunConfig,
    out_dir: &Path,
    fault: Option<Fault>,
) -> Result<Vec<CheckResult>> {
    std::fs::create_dir_all(out_dir)?;
    let results = run_checks(cfg, fault)?;
    let mut w = RecordWriter::create(&out_dir.join("verify.jsonl"), "verify")?;
    for r in &results {
        w.write(r)?;
    }
    std::fs::write(out_dir.join("verify_report.txt"), report_text(&results))?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::read_records;
    use crate::runcfg::tests::sample;

    fn cfg() -> RunConfig {
        let mut cfg = sample();
        cfg.model.max_seq_len = 64;
        cfg.task.n_train = 64;
        cfg.task.n_eval = 16;
        cfg.bench = None;
        cfg
    }

    #[test]
    fn clean_battery_passes_every_check() {
        let results = run_checks(&cfg(), None).unwrap();
        assert_eq!(results.len(), 9);
        for r in &results {
            assert!(r.pass, "{}: {}", r.id, r.detail);
        }
    }

    #[test]
    fn injected_wrong_eps_is_caught_by_the_equivalence_check() {
        let results = run_checks(&cfg(), Some(Fault::WrongEpsInCombined)).unwrap();
        let hit = results.iter().find(|r| r.id == "combined-pair-vs-two-pass").unwrap();
        assert!(!hit.pass, "fault went undetected: {}", hit.detail);
        // The fault is scoped: unrelated checks still pass.
        assert!(results.iter().filter(|r| !r.pass).count() == 1);
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_and_write(&cfg(), d1.path(), None).unwrap();
        run_and_write(&cfg(), d2.path(), None).unwrap();
        for name in ["verify.jsonl", "verify_report.txt"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let recs: Vec<CheckResult> =
            read_records(&d1.path().join("verify.jsonl"), "verify").unwrap();
        assert_eq!(recs.len(), 9);
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!(Fault::from_name("wrong_eps"), Some(Fault::WrongEpsInCombined));
        assert_eq!(Fault::from_name("nope"), None);
    }
}
