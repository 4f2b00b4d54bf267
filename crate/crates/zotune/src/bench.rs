//! Benchmark sweeps: wall time, peak working memory, and counter audits
//! over a grid of (sequence length, batch size, query count, mode) cells.
//!
//! Protocol per cell: build the model fresh, run `warmup` untimed
//! repetitions, then `steps` timed repetitions; the summary reports the
//! median. Peak bytes are reported *in excess of* the resident baseline
//! (model weights plus standing training state), mirroring comparisons
//! that exclude parameter storage. One cell runs at a time so timing is
//! undisturbed.
//!
//! A cell that would exceed the configured allocation ceiling panics
//! inside the tracked allocator; the sweep catches that panic, emits a
//! failed-cell record, and moves on.
//!
//! Output: a deterministic records file (`bench.jsonl`), a wall-clock
//! timing sidecar (`bench.timing.jsonl`, excluded from byte-identity), and
//! a human-readable summary table (`bench_summary.txt`, derived from the
//! timings, likewise excluded).

use crate::dual::DualState;
use crate::error::{Error, Result};
use crate::model::{forward_passes, Batch, Model};
use crate::parallel::{master_step, mean_loss, sequential_model_step, ParallelMode};
use crate::quant::dequant_total;
use crate::records::{timing_sidecar_path, BenchRecord, RecordWriter, TimingRecord};
use crate::rng::{mix, RngStream};
use crate::runcfg::{BenchConfig, BenchMode, RunConfig};
use crate::zo::{ParamSet, SeedSchedule};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Domain tag for benchmark batch contents.
const BENCH_TAG: u64 = 0x6265_6E63_68; // "bench"

/// One grid cell's identity and aggregate results.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: String,
    pub mode: BenchMode,
    pub seq: usize,
    pub batch: usize,
    pub q: usize,
    pub quantized: bool,
    pub ok: bool,
    pub fail_reason: Option<String>,
    /// Median wall time over the timed repetitions, milliseconds.
    pub median_wall_ms: f64,
    /// Median peak bytes in excess of the resident baseline.
    pub median_peak_bytes: u64,
    pub forward_count: u64,
    pub dequant_count: u64,
    pub first_loss: f64,
}

/// Everything a sweep produced, plus where it was written.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellSummary>,
    pub records_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Analytic activation-footprint proxy for gradient-based training, in
/// bytes: the summed sizes of every layer's outputs at the given batch
/// shape, which backprop would need to retain simultaneously. Per token:
/// the embedding row, and per block two norm outputs, q/k/v/attention/
/// output-projection rows (5·d), and the MLP up and down outputs
/// (d_ff + d); plus the final norm and logits at each labeled position.
///
/// This is the *memory a first-order trainer would keep live*; forward-only
/// training never retains these simultaneously, which is the comparison
/// the sweep quantifies.
pub fn fo_activation_proxy_bytes(model: &Model, rows: usize, seq: usize) -> u64 {
    let c = model.config();
    let d = c.d_model as u64;
    let ff = c.d_ff as u64;
    let v = c.vocab_size as u64;
    let l = c.n_layers as u64;
    let tokens = (rows * seq) as u64;
    let per_token_block = 2 * d + 5 * d + ff + d; // norms, q/k/v/attn/out, mlp up+down
    let per_token = d + l * per_token_block; // + embedding row
    let labeled = rows as u64 * (d + v); // final norm + logits
    4 * (tokens * per_token + labeled)
}

/// Deterministic benchmark batch: `rows` rows of exactly `seq` content
/// tokens (no padding), labels uniform over content tokens.
pub fn bench_batch(model: &Model, rows: usize, seq: usize, seed: u64) -> Result<Batch> {
    let vocab = model.config().vocab_size as u64;
    if vocab < 3 {
        return Err(Error::Config("benchmark batches need vocab_size >= 3".into()));
    }
    let mut stream = RngStream::new(mix(seed, BENCH_TAG));
    let mut rows_v = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<u32> = (0..seq).map(|_| 2 + stream.next_below(vocab - 2) as u32).collect();
        labels.push(2 + stream.next_below(vocab - 2) as u32);
        rows_v.push(row);
    }
    Batch::new(&rows_v, &labels, None)
}

struct CellPlan {
    cell: String,
    mode: BenchMode,
    seq: usize,
    batch: usize,
    q: usize,
    quantized: bool,
}

fn cell_id(mode: BenchMode, q: usize, b: usize, s: usize, quantized: bool) -> String {
    let suffix = if quantized { "-int8" } else { "" };
    match mode {
        BenchMode::Infer => format!("infer-b{b}-s{s}{suffix}"),
        m => format!("{}-q{q}-b{b}-s{s}{suffix}", m.name()),
    }
}

fn grid_cells(bench: &BenchConfig) -> Vec<CellPlan> {
    let quant_variants: &[bool] = if bench.quantize { &[false, true] } else { &[false] };
    let mut cells = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &quantized in quant_variants {
        for &mode in &bench.modes {
            for &seq in &bench.seq_lens {
                for &batch in &bench.batch_sizes {
                    for &q in &bench.qs {
                        // Inference has no query axis; collapse it.
                        let q = if mode == BenchMode::Infer { 1 } else { q };
                        let cell = cell_id(mode, q, batch, seq, quantized);
                        if seen.insert(cell.clone()) {
                            cells.push(CellPlan { cell, mode, seq, batch, q, quantized });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Per-repetition measurements for one cell.
struct RepResult {
    losses: Vec<f64>,
    peak_bytes: u64,
    forward_count: u64,
    dequant_count: u64,
    wall_ms: f64,
    padding_fraction: f64,
}

struct CellRun {
    model: Model,
    set: ParamSet,
    batch: Batch,
    schedule: SeedSchedule,
    dual: Option<DualState>,
    baseline_bytes: u64,
    step: u64,
}

impl CellRun {
    fn prepare(cfg: &RunConfig, plan: &CellPlan, seed: u64) -> Result<CellRun> {
        let mut model = Model::init(&cfg.model, seed)?;
        if plan.quantized {
            model.quantize_weights()?;
        }
        let set = model.lora_b_param_set();
        let schedule = SeedSchedule::new(mix(seed, BENCH_TAG));
        let batch = bench_batch(&model, plan.batch, plan.seq, seed)?;
        let eps = cfg.train.eps;
        let lr = cfg.train.lr;
        let dual = match plan.mode {
            BenchMode::Dual => Some(DualState::new(&model, plan.q, eps, lr, &schedule)?),
            _ => None,
        };
        // Resident baseline: weights, the benchmark batch, and any
        // standing training state — everything that exists between steps.
        let baseline_bytes = crate::alloc::stats().live_bytes;
        Ok(CellRun { model, set, batch, schedule, dual, baseline_bytes, step: 0 })
    }

    fn one_rep(&mut self, cfg: &RunConfig, plan: &CellPlan) -> Result<RepResult> {
        let eps = cfg.train.eps;
        let lr = cfg.train.lr;
        let started = Instant::now();
        let fp0 = forward_passes();
        let dq0 = dequant_total();
        crate::alloc::reset_peak();
        let losses = match plan.mode {
            BenchMode::Infer => vec![mean_loss(&self.model, &self.batch, None)?],
            BenchMode::Sequential => {
                let s = sequential_model_step(
                    &mut self.model,
                    &self.set,
                    &self.batch,
                    plan.q,
                    eps,
                    lr,
                    &self.schedule,
                    self.step,
                )?;
                s.loss_plus.into_iter().chain(s.loss_minus).collect()
            }
            BenchMode::Outer | BenchMode::Inner => {
                let mode = if plan.mode == BenchMode::Outer {
                    ParallelMode::Outer
                } else {
                    ParallelMode::Inner
                };
                let s = master_step(
                    &mut self.model,
                    &self.set,
                    &self.batch,
                    plan.q,
                    eps,
                    lr,
                    &self.schedule,
                    self.step,
                    mode,
                )?;
                s.loss_plus.into_iter().chain(s.loss_minus).collect()
            }
            BenchMode::Dual => {
                let state = self.dual.as_mut().expect("dual state exists");
                let s = state.step(&self.model, &self.batch, &self.schedule)?;
                s.loss_plus.into_iter().chain(s.loss_minus).collect()
            }
        };
        let peak = crate::alloc::stats().peak_bytes;
        let result = RepResult {
            losses,
            peak_bytes: peak.saturating_sub(self.baseline_bytes),
            forward_count: forward_passes() - fp0,
            dequant_count: dequant_total() - dq0,
            wall_ms: (started.elapsed().as_secs_f64() * 1e3).max(1e-6),
            padding_fraction: self.batch.padding_fraction(),
        };
        self.step += 1;
        Ok(result)
    }
}

fn median_f64(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values[values.len() / 2]
}

fn median_u64(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    values[values.len() / 2]
}

/// Run the whole grid, writing records + timing sidecar + summary table.
pub fn run_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    let bench = cfg.bench.clone().unwrap_or_default();
    let seed = seed_override.unwrap_or(cfg.seed);
    std::fs::create_dir_all(out_dir)?;
    let records_path = out_dir.join("bench.jsonl");
    let summary_path = out_dir.join("bench_summary.txt");
    let mut records = RecordWriter::create(&records_path, "bench")?;
    let mut timings = RecordWriter::create(&timing_sidecar_path(&records_path), "bench.timing")?;

    let cells = grid_cells(&bench);
    if cells.is_empty() {
        return Err(Error::Config("benchmark grid is empty".into()));
    }
    let mut summaries = Vec::with_capacity(cells.len());
    for plan in &cells {
        let summary = run_cell(cfg, &bench, plan, seed, &mut records, &mut timings)?;
        summaries.push(summary);
    }
    let table = summary_table(&summaries);
    std::fs::write(&summary_path, table)?;
    Ok(SweepOutcome { cells: summaries, records_path, summary_path })
}

fn run_cell(
    cfg: &RunConfig,
    bench: &BenchConfig,
    plan: &CellPlan,
    seed: u64,
    records: &mut RecordWriter,
    timings: &mut RecordWriter,
) -> Result<CellSummary> {
    let limit = bench.mem_limit_mb.map(|mb| mb as u64 * (1 << 20));
    let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<Vec<RepResult>> {
        let mut run = CellRun::prepare(cfg, plan, seed)?;
        if let Some(l) = limit {
            crate::alloc::set_limit(Some(run.baseline_bytes + l));
        }
        let mut reps = Vec::with_capacity(bench.steps);
        for i in 0..bench.warmup + bench.steps {
            let rep = run.one_rep(cfg, plan)?;
            if i >= bench.warmup {
                reps.push(rep);
            }
        }
        Ok(reps)
    }));
    crate::alloc::set_limit(None);

    let reps = match attempt {
        Ok(Ok(reps)) => reps,
        Ok(Err(e)) => return Err(e),
        Err(panic) => {
            let is_limit = panic
                .downcast_ref::<String>()
                .map(|s| s.contains(crate::alloc::LIMIT_PANIC))
                .or_else(|| {
                    panic.downcast_ref::<&str>().map(|s| s.contains(crate::alloc::LIMIT_PANIC))
                })
                .unwrap_or(false);
            if !is_limit {
                std::panic::resume_unwind(panic);
            }
            let reason =
                format!("exceeded memory ceiling of {} MiB", bench.mem_limit_mb.unwrap_or(0));
            records.write(&BenchRecord {
                cell: plan.cell.clone(),
                step_index: 0,
                ok: false,
                fail_reason: Some(reason.clone()),
                peak_bytes: 0,
                padding_fraction: 0.0,
                forward_count: 0,
                dequant_count: 0,
                losses: vec![],
            })?;
            return Ok(CellSummary {
                cell: plan.cell.clone(),
                mode: plan.mode,
                seq: plan.seq,
                batch: plan.batch,
                q: plan.q,
                quantized: plan.quantized,
                ok: false,
                fail_reason: Some(reason),
                median_wall_ms: 0.0,
                median_peak_bytes: 0,
                forward_count: 0,
                dequant_count: 0,
                first_loss: f64::NAN,
            });
        }
    };

    let mut walls = Vec::with_capacity(reps.len());
    for (i, rep) in reps.iter().enumerate() {
        records.write(&BenchRecord {
            cell: plan.cell.clone(),
            step_index: i as u64,
            ok: true,
            fail_reason: None,
            peak_bytes: rep.peak_bytes,
            padding_fraction: rep.padding_fraction,
            forward_count: rep.forward_count,
            dequant_count: rep.dequant_count,
            losses: rep.losses.clone(),
        })?;
        timings.write(&TimingRecord::new(plan.cell.clone(), i as u64, rep.wall_ms)?)?;
        walls.push(rep.wall_ms);
    }
    let mut peaks: Vec<u64> = reps.iter().map(|r| r.peak_bytes).collect();
    Ok(CellSummary {
        cell: plan.cell.clone(),
        mode: plan.mode,
        seq: plan.seq,
        batch: plan.batch,
        q: plan.q,
        quantized: plan.quantized,
        ok: true,
        fail_reason: None,
        median_wall_ms: median_f64(&mut walls),
        median_peak_bytes: median_u64(&mut peaks),
        forward_count: reps[0].forward_count,
        dequant_count: reps[0].dequant_count,
        first_loss: reps[0].losses[0],
    })
}

fn summary_table(cells: &[CellSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>10} {:>12} {:>8} {:>8} {:>10}\n",
        "cell", "wall_ms", "peak_KiB", "fwd", "dequant", "loss"
    ));
    for c in cells {
        if c.ok {
            out.push_str(&format!(
                "{:<28} {:>10.3} {:>12} {:>8} {:>8} {:>10.4}\n",
                c.cell,
                c.median_wall_ms,
                c.median_peak_bytes / 1024,
                c.forward_count,
                c.dequant_count,
                c.first_loss
            ));
        } else {
            out.push_str(&format!(
                "{:<28} FAILED: {}\n",
                c.cell,
                c.fail_reason.as_deref().unwrap_or("unknown")
            ));
        }
    }
    out
}
