//! A small pre-norm decoder transformer with frozen-A low-rank adapters.
//!
//! The model exists to be *tuned without backprop*: every base weight is
//! frozen at initialization, and the only trainable tensors are the `B`
//! halves of low-rank adapter pairs attached to chosen projections. An
//! adapted projection computes
//!
//! ```text
//! y = x·W  +  (alpha/r) · (x·A) · B
//! ```
//!
//! with `W` frozen (optionally int8-quantized), `A ~ N(0, 1/k_in)` frozen,
//! and `B` initialized to zero — so a fresh model behaves exactly like the
//! base model. Freezing `A` matters beyond memory: since only `B` moves,
//! a batched forward can evaluate many differently-perturbed copies of `B`
//! at once by stacking them into a batched matmul (see
//! [`parallel`](crate::parallel)).
//!
//! Architecture per block: RMS-norm → causal multi-head attention → residual,
//! RMS-norm → SiLU MLP → residual; sinusoidal position encoding; a final
//! RMS-norm and an untied output projection. The loss is cross-entropy over
//! the full vocabulary at a single labeled position per row.
//!
//! The forward pass is written for a *small live set*: each intermediate
//! activation is dropped as soon as it has been consumed, so peak memory is
//! essentially independent of depth — the property that makes forward-only
//! training cheap. Per-row losses are exact regardless of padding: attention
//! is causal, so positions appended after a row's label can never influence
//! its loss.

use crate::alloc::TrackedVec;
use crate::error::{Error, Result};
use crate::quant::{dequant_matmul, quantize, QuantTensor};
use crate::rng::{mix, RngStream};
use crate::tensor::{add_assign, axpy, bmm, matmul, rms_norm, silu_inplace, Tensor};
use crate::zo::{ParamSet, ParamStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Epsilon inside the RMS normalization.
pub const RMS_EPS: f32 = 1e-5;

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Process-global count of forward passes (loss evaluations) so far.
pub fn forward_passes() -> u64 {
    FORWARD_PASSES.load(Ordering::SeqCst)
}

/// Projections an adapter pair can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
}

impl LoraTarget {
    /// All targets in canonical order (the order adapters are initialized
    /// and enumerated in).
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
        LoraTarget::MlpUp,
        LoraTarget::MlpDown,
    ];

    /// Stable numeric code used in the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            LoraTarget::Query => 0,
            LoraTarget::Key => 1,
            LoraTarget::Value => 2,
            LoraTarget::Output => 3,
            LoraTarget::MlpUp => 4,
            LoraTarget::MlpDown => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<LoraTarget> {
        LoraTarget::ALL.into_iter().find(|t| t.code() == code)
    }

    fn path(self) -> &'static str {
        match self {
            LoraTarget::Query => "attn.wq",
            LoraTarget::Key => "attn.wk",
            LoraTarget::Value => "attn.wv",
            LoraTarget::Output => "attn.wo",
            LoraTarget::MlpUp => "mlp.up",
            LoraTarget::MlpDown => "mlp.down",
        }
    }
}

fn default_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpDown]
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Projections that receive adapters (default: query, value, MLP down).
    #[serde(default = "default_targets")]
    pub lora_targets: Vec<LoraTarget>,
}

impl ModelConfig {
    /// Validate every structural constraint; all model construction goes
    /// through this.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!(
                "d_model must be positive and even (sinusoidal positions), got {}",
                self.d_model
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.lora_rank < 1 || self.lora_rank >= self.d_model.min(self.d_ff) {
            return fail(format!(
                "lora_rank must satisfy 1 <= r < min(d_model, d_ff) = {}, got {}",
                self.d_model.min(self.d_ff),
                self.lora_rank
            ));
        }
        if !(self.lora_alpha > 0.0) {
            return fail(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if self.lora_targets.is_empty() {
            return fail("lora_targets must not be empty".into());
        }
        let mut seen = self.lora_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.lora_targets.len() {
            return fail("lora_targets contains duplicates".into());
        }
        Ok(())
    }

    /// Adapter branch multiplier `alpha / r`.
    pub fn lora_scaling(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    /// Targets in canonical order, filtered to the configured set.
    pub fn targets_in_order(&self) -> Vec<LoraTarget> {
        LoraTarget::ALL.into_iter().filter(|t| self.lora_targets.contains(t)).collect()
    }
}

/// A frozen weight matrix, stored dense or int8-quantized.
#[derive(Debug, Clone)]
pub enum WeightMat {
    Dense(Tensor),
    Quant(QuantTensor),
}

impl WeightMat {
    fn product(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            WeightMat::Dense(w) => matmul(x, w),
            WeightMat::Quant(q) => dequant_matmul(x, q),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        match self {
            WeightMat::Dense(w) => [w.shape()[0], w.shape()[1]],
            WeightMat::Quant(q) => q.shape(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, WeightMat::Quant(_))
    }
}

/// Frozen-A adapter pair for one projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Frozen input half, `[k_in, r]`, Gaussian-initialized.
    pub a: Tensor,
    /// Trainable output half, `[r, k_out]`, zero-initialized.
    pub b: Tensor,
}

/// A projection: frozen weight plus optional adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: WeightMat,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp_norm: Tensor,
    up: Linear,
    down: Linear,
}

/// Per-adapter replacement tensors for the trainable `B` halves, keyed by
/// parameter name (e.g. `"blocks.0.attn.wq.lora_b"`).
///
/// A value of shape `[r, k_out]` replaces the master `B` for every row; a
/// value of shape `[g, r, k_out]` splits the batch rows into `g` equal
/// contiguous groups, group `j` seeing slice `j`. All adapters must be
/// overridden together with one consistent `g`.
pub type BOverrides = BTreeMap<String, Tensor>;

/// A batch of token rows, each with exactly one labeled position (the last
/// real token of the row). Rows shorter than the batch width are padded
/// with token 0; padding never affects any row's loss.
#[derive(Debug)]
pub struct Batch {
    tokens: TrackedVec<u32>,
    n_rows: usize,
    seq: usize,
    row_len: Vec<usize>,
    labels: Vec<u32>,
}

impl Batch {
    /// Build a batch from rows and labels. Rows are padded to the longest
    /// row, or to `pad_to` if given (which must fit every row).
    pub fn new(rows: &[Vec<u32>], labels: &[u32], pad_to: Option<usize>) -> Result<Batch> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(Error::Data(format!(
                "batch needs matching non-empty rows and labels, got {} rows / {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let longest = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        if longest == 0 {
            return Err(Error::Data("batch rows must be non-empty".into()));
        }
        let seq = pad_to.unwrap_or(longest);
        if seq < longest {
            return Err(Error::Data(format!(
                "pad_to {seq} is shorter than the longest row ({longest})"
            )));
        }
        let mut tokens = TrackedVec::filled(0u32, rows.len() * seq);
        let mut row_len = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            tokens.as_mut_slice()[r * seq..r * seq + row.len()].copy_from_slice(row);
            row_len.push(row.len());
        }
        Ok(Batch { tokens, n_rows: rows.len(), seq, row_len, labels: labels.to_vec() })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn tokens(&self) -> &[u32] {
        self.tokens.as_slice()
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.row_len[row]
    }

    /// The single labeled position of a row: its last real token.
    pub fn label_pos(&self, row: usize) -> usize {
        self.row_len[row] - 1
    }

    pub fn label(&self, row: usize) -> u32 {
        self.labels[row]
    }

    /// True where a position holds a real token rather than padding.
    pub fn pad_mask(&self, row: usize, pos: usize) -> bool {
        pos < self.row_len[row]
    }

    /// Fraction of token slots that are padding.
    pub fn padding_fraction(&self) -> f64 {
        let real: usize = self.row_len.iter().sum();
        1.0 - real as f64 / (self.n_rows * self.seq) as f64
    }

    /// Repeat the batch `factor` times, group-wise: the result has `factor`
    /// contiguous groups, each containing this batch's rows in order. Group
    /// `j` of the result lines up with override slice `j` in a stacked
    /// forward pass.
    pub fn duplicate(&self, factor: usize) -> Batch {
        assert!(factor >= 1);
        let mut tokens = TrackedVec::filled(0u32, factor * self.n_rows * self.seq);
        let src = self.tokens.as_slice();
        let chunk = self.n_rows * self.seq;
        for g in 0..factor {
            tokens.as_mut_slice()[g * chunk..(g + 1) * chunk].copy_from_slice(src);
        }
        Batch {
            tokens,
            n_rows: factor * self.n_rows,
            seq: self.seq,
            row_len: (0..factor).flat_map(|_| self.row_len.iter().copied()).collect(),
            labels: (0..factor).flat_map(|_| self.labels.iter().copied()).collect(),
        }
    }
}

/// Mean loss of each contiguous row group.
///
/// `per_row` has `g · rows_per_group` entries; the result averages each
/// group in row order (accumulating in `f64`, the crate-wide convention for
/// scalar loss aggregation).
pub fn loss_per_copy(per_row: &Tensor, groups: usize) -> Result<Vec<f64>> {
    let n = per_row.len();
    if groups == 0 || n % groups != 0 {
        return Err(Error::Shape(format!(
            "cannot split {n} row losses into {groups} equal groups"
        )));
    }
    let per = n / groups;
    Ok(per_row
        .data()
        .chunks(per)
        .map(|chunk| chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64)
        .collect())
}

/// The transformer.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
    lm_head: Linear,
}

fn gaussian_scaled(stream: &mut RngStream, shape: &[usize], std: f32) -> Tensor {
    let mut t = Tensor::gaussian(stream, shape);
    for v in t.data_mut() {
        *v *= std;
    }
    t
}

impl Model {
    /// Initialize a model from its configuration and a seed.
    ///
    /// Initialization is bitwise deterministic: one noise stream derived
    /// from `seed` is consumed in a fixed order (embedding, then each
    /// block's projections followed by its adapter `A` halves in canonical
    /// target order, then the output head). Norm gains start at 1, adapter
    /// `B` halves at exactly 0. Projection weights use std `1/sqrt(k_in)`
    /// so activations stay O(1) at any width; the output head uses half
    /// that, which keeps the untrained loss within a few percent of the
    /// uniform-distribution loss `ln(vocab_size)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let c = config;
        let mut stream = RngStream::new(mix(seed, 0x6D6F_64656C)); // "model"
        let d = c.d_model;
        let embed = Tensor::gaussian(&mut stream, &[c.vocab_size, d]);

        let adapter_for = |target: LoraTarget,
                           k_in: usize,
                           k_out: usize,
                           stream: &mut RngStream|
         -> Option<LoraAdapter> {
            if !c.lora_targets.contains(&target) {
                return None;
            }
            let a = gaussian_scaled(stream, &[k_in, c.lora_rank], 1.0 / (k_in as f32).sqrt());
            let b = Tensor::zeros(&[c.lora_rank, k_out]);
            Some(LoraAdapter { a, b })
        };

        let mut blocks = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let proj_std = 1.0 / (d as f32).sqrt();
            let wq = gaussian_scaled(&mut stream, &[d, d], proj_std);
            let wk = gaussian_scaled(&mut stream, &[d, d], proj_std);
            let wv = gaussian_scaled(&mut stream, &[d, d], proj_std);
            let wo = gaussian_scaled(&mut stream, &[d, d], proj_std);
            let up = gaussian_scaled(&mut stream, &[d, c.d_ff], proj_std);
            let down = gaussian_scaled(&mut stream, &[c.d_ff, d], 1.0 / (c.d_ff as f32).sqrt());
            // Adapter A halves, canonical target order.
            let mut adapters: BTreeMap<u8, LoraAdapter> = BTreeMap::new();
            for t in c.targets_in_order() {
                let (k_in, k_out) = match t {
                    LoraTarget::Query
                    | LoraTarget::Key
                    | LoraTarget::Value
                    | LoraTarget::Output => (d, d),
                    LoraTarget::MlpUp => (d, c.d_ff),
                    LoraTarget::MlpDown => (c.d_ff, d),
                };
                if let Some(ad) = adapter_for(t, k_in, k_out, &mut stream) {
                    adapters.insert(t.code(), ad);
                }
            }
            let lin = |w: Tensor, t: LoraTarget, adapters: &mut BTreeMap<u8, LoraAdapter>| Linear {
                weight: WeightMat::Dense(w),
                adapter: adapters.remove(&t.code()),
            };
            blocks.push(Block {
                attn_norm: Tensor::from_vec(&[d], vec![1.0; d])?,
                wq: lin(wq, LoraTarget::Query, &mut adapters),
                wk: lin(wk, LoraTarget::Key, &mut adapters),
                wv: lin(wv, LoraTarget::Value, &mut adapters),
                wo: lin(wo, LoraTarget::Output, &mut adapters),
                mlp_norm: Tensor::from_vec(&[d], vec![1.0; d])?,
                up: lin(up, LoraTarget::MlpUp, &mut adapters),
                down: lin(down, LoraTarget::MlpDown, &mut adapters),
            });
        }
        let lm_head = Linear {
            weight: WeightMat::Dense(gaussian_scaled(
                &mut stream,
                &[d, c.vocab_size],
                0.5 / (d as f32).sqrt(),
            )),
            adapter: None,
        };
        Ok(Model {
            config: c.clone(),
            embed,
            pos: sinusoidal_table(c.max_seq_len, d),
            blocks,
            final_norm: Tensor::from_vec(&[d], vec![1.0; d])?,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Names of the trainable adapter `B` parameters, canonical order
    /// (block-major, then canonical target order).
    pub fn lora_b_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.blocks.iter().enumerate() {
            for t in self.config.targets_in_order() {
                names.push(format!("blocks.{i}.{}.lora_b", t.path()));
            }
        }
        names
    }

    /// The adapter-only parameter set (the standard training target).
    pub fn lora_b_param_set(&self) -> ParamSet {
        ParamSet::new(self, self.lora_b_names()).expect("adapter names resolve")
    }

    /// Names of every float parameter that full-space tuning perturbs: all
    /// dense weights, norms, embedding and head, plus adapter `B` halves.
    /// Adapter `A` halves are excluded (frozen by construction). Errors if
    /// any projection is quantized — full-space tuning needs float weights.
    pub fn full_param_names(&self) -> Result<Vec<String>> {
        let mut names = vec!["embed.weight".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            let quantized = [&b.wq, &b.wk, &b.wv, &b.wo, &b.up, &b.down]
                .iter()
                .any(|l| l.weight.is_quantized())
                || self.lm_head.weight.is_quantized();
            if quantized {
                return Err(Error::Config(
                    "full-space tuning requires dense float weights, but the model is quantized"
                        .into(),
                ));
            }
            names.push(format!("blocks.{i}.attn_norm.weight"));
            for part in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                names.push(format!("blocks.{i}.{part}.weight"));
            }
            names.push(format!("blocks.{i}.mlp_norm.weight"));
            names.push(format!("blocks.{i}.mlp.up.weight"));
            names.push(format!("blocks.{i}.mlp.down.weight"));
            for t in self.config.targets_in_order() {
                names.push(format!("blocks.{i}.{}.lora_b", t.path()));
            }
        }
        names.push("final_norm.weight".to_string());
        names.push("lm_head.weight".to_string());
        Ok(names)
    }

    /// Quantize every frozen projection and the output head to int8.
    /// Embedding, norms and adapters stay float.
    pub fn quantize_weights(&mut self) -> Result<()> {
        let do_one = |lin: &mut Linear| -> Result<()> {
            if let WeightMat::Dense(w) = &lin.weight {
                lin.weight = WeightMat::Quant(quantize(w)?);
            }
            Ok(())
        };
        for b in &mut self.blocks {
            do_one(&mut b.wq)?;
            do_one(&mut b.wk)?;
            do_one(&mut b.wv)?;
            do_one(&mut b.wo)?;
            do_one(&mut b.up)?;
            do_one(&mut b.down)?;
        }
        do_one(&mut self.lm_head)
    }

    /// Number of int8-quantized weight matrices in the model.
    pub fn quantized_matrix_count(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            for lin in [&b.wq, &b.wk, &b.wv, &b.wo, &b.up, &b.down] {
                if lin.weight.is_quantized() {
                    n += 1;
                }
            }
        }
        if self.lm_head.weight.is_quantized() {
            n += 1;
        }
        n
    }

    /// Per-row cross-entropy losses at each row's labeled position.
    ///
    /// With `overrides`, the adapter `B` halves are replaced (possibly by
    /// stacked per-row-group copies) without touching the stored masters;
    /// see [`BOverrides`].
    pub fn forward_loss(&self, batch: &Batch, overrides: Option<&BOverrides>) -> Result<Tensor> {
        Ok(self.forward_core(batch, overrides)?.0)
    }

    /// Like [`forward_loss`](Model::forward_loss) but also returns the
    /// argmax-predicted token at each labeled position.
    pub fn forward_eval(
        &self,
        batch: &Batch,
        overrides: Option<&BOverrides>,
    ) -> Result<(Tensor, Vec<u32>)> {
        let (losses, preds) = self.forward_core(batch, overrides)?;
        Ok((losses, preds))
    }

    fn forward_core(
        &self,
        batch: &Batch,
        overrides: Option<&BOverrides>,
    ) -> Result<(Tensor, Vec<u32>)> {
        FORWARD_PASSES.fetch_add(1, Ordering::SeqCst);
        let c = &self.config;
        let (n, s, d) = (batch.n_rows(), batch.seq(), c.d_model);
        if s > c.max_seq_len {
            return Err(Error::Data(format!(
                "batch width {s} exceeds the model maximum {}",
                c.max_seq_len
            )));
        }
        for &t in batch.tokens() {
            if t as usize >= c.vocab_size {
                return Err(Error::Data(format!("token id {t} out of vocabulary")));
            }
        }
        for r in 0..n {
            if batch.label(r) as usize >= c.vocab_size {
                return Err(Error::Data(format!("label id {} out of vocabulary", batch.label(r))));
            }
        }
        let groups = self.validate_overrides(overrides, n)?;

        // Embedding + positions.
        let mut x = Tensor::zeros(&[n * s, d]);
        {
            let embed = self.embed.data();
            let pos = self.pos.data();
            let tokens = batch.tokens();
            x.data_mut().par_chunks_mut(d).enumerate().for_each(|(row, out)| {
                let tok = tokens[row] as usize;
                let p = row % s;
                let e = &embed[tok * d..(tok + 1) * d];
                let pe = &pos[p * d..(p + 1) * d];
                for ((o, &ev), &pv) in out.iter_mut().zip(e).zip(pe) {
                    *o = ev + pv;
                }
            });
        }

        for (bi, block) in self.blocks.iter().enumerate() {
            // Attention sub-block.
            let normed = rms_norm(&x, &block.attn_norm, RMS_EPS)?;
            let q = self.linear(
                &block.wq,
                &format!("blocks.{bi}.attn.wq"),
                &normed,
                overrides,
                groups,
            )?;
            let k = self.linear(
                &block.wk,
                &format!("blocks.{bi}.attn.wk"),
                &normed,
                overrides,
                groups,
            )?;
            let v = self.linear(
                &block.wv,
                &format!("blocks.{bi}.attn.wv"),
                &normed,
                overrides,
                groups,
            )?;
            drop(normed);
            let ctx = causal_attention(&q, &k, &v, n, s, c.n_heads);
            drop(q);
            drop(k);
            drop(v);
            let attn_out =
                self.linear(&block.wo, &format!("blocks.{bi}.attn.wo"), &ctx, overrides, groups)?;
            drop(ctx);
            add_assign(&mut x, &attn_out);
            drop(attn_out);

            // MLP sub-block.
            let normed = rms_norm(&x, &block.mlp_norm, RMS_EPS)?;
            let mut up =
                self.linear(&block.up, &format!("blocks.{bi}.mlp.up"), &normed, overrides, groups)?;
            drop(normed);
            silu_inplace(&mut up);
            let down =
                self.linear(&block.down, &format!("blocks.{bi}.mlp.down"), &up, overrides, groups)?;
            drop(up);
            add_assign(&mut x, &down);
            drop(down);
        }

        // Only the labeled position of each row reaches the output head.
        let mut label_rows = Tensor::zeros(&[n, d]);
        {
            let xd = x.data();
            for r in 0..n {
                let src = (r * s + batch.label_pos(r)) * d;
                label_rows.data_mut()[r * d..(r + 1) * d].copy_from_slice(&xd[src..src + d]);
            }
        }
        drop(x);
        let normed = rms_norm(&label_rows, &self.final_norm, RMS_EPS)?;
        drop(label_rows);
        let logits = self.lm_head.weight.product(&normed)?;
        drop(normed);

        // Cross-entropy over the full vocabulary, accumulated in f64.
        let v_sz = c.vocab_size;
        let mut losses = Tensor::zeros(&[n]);
        let mut preds = vec![0u32; n];
        for r in 0..n {
            let row = &logits.data()[r * v_sz..(r + 1) * v_sz];
            let mut max = f32::NEG_INFINITY;
            let mut arg = 0usize;
            for (j, &l) in row.iter().enumerate() {
                if l > max {
                    max = l;
                    arg = j;
                }
            }
            let mut sum = 0.0f64;
            for &l in row {
                sum += ((l - max) as f64).exp();
            }
            let lse = max as f64 + sum.ln();
            losses.data_mut()[r] = (lse - row[batch.label(r) as usize] as f64) as f32;
            preds[r] = arg as u32;
        }
        Ok((losses, preds))
    }

    /// Check override completeness/shapes; returns the group count `g`.
    fn validate_overrides(&self, overrides: Option<&BOverrides>, n_rows: usize) -> Result<usize> {
        let Some(ov) = overrides else { return Ok(1) };
        let expected = self.lora_b_names();
        if ov.len() != expected.len() {
            return Err(Error::Shape(format!(
                "override map has {} entries, model has {} adapters",
                ov.len(),
                expected.len()
            )));
        }
        let mut groups = None;
        for name in &expected {
            let t = ov
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing override for adapter '{name}'")))?;
            let master = self.param(name).expect("adapter names resolve");
            let (g, slice_shape) = match *t.shape() {
                [r, k] => (1usize, [r, k]),
                [g, r, k] => (g, [r, k]),
                ref other => {
                    return Err(Error::Shape(format!(
                        "override '{name}' must be 2-d or 3-d, got {other:?}"
                    )))
                }
            };
            if slice_shape[..] != *master.shape() {
                return Err(Error::Shape(format!(
                    "override '{name}' slice shape {slice_shape:?} does not match adapter {:?}",
                    master.shape()
                )));
            }
            match groups {
                None => groups = Some(g),
                Some(prev) if prev != g => {
                    return Err(Error::Shape(format!(
                        "override '{name}' has {g} slices, earlier adapters had {prev}"
                    )))
                }
                _ => {}
            }
        }
        let g = groups.unwrap_or(1);
        if n_rows % g != 0 {
            return Err(Error::Shape(format!(
                "batch of {n_rows} rows cannot split into {g} override groups"
            )));
        }
        Ok(g)
    }

    /// One projection: frozen product plus, if adapted, the scaled low-rank
    /// branch — master `B`, a replacement `B`, or `g` stacked copies routed
    /// to contiguous row groups.
    fn linear(
        &self,
        lin: &Linear,
        path: &str,
        x: &Tensor,
        overrides: Option<&BOverrides>,
        groups: usize,
    ) -> Result<Tensor> {
        let mut y = lin.weight.product(x)?;
        if let Some(ad) = &lin.adapter {
            let xa = matmul(x, &ad.a)?;
            let name = format!("{path}.lora_b");
            let b = overrides.and_then(|ov| ov.get(&name)).unwrap_or(&ad.b);
            let branch = match b.shape() {
                [_, _] => matmul(&xa, b)?,
                [g, r, k_out] => {
                    let rows = xa.shape()[0];
                    let per = rows / g;
                    let grouped = xa.reshape(&[*g, per, *r])?;
                    let stacked = bmm(&grouped, b)?;
                    stacked.reshape(&[rows, *k_out])?
                }
                other => {
                    return Err(Error::Shape(format!(
                        "adapter tensor '{name}' has impossible shape {other:?}"
                    )))
                }
            };
            let _ = groups; // group count already validated against b's shape
            axpy(&mut y, self.config.lora_scaling(), &branch);
        }
        Ok(y)
    }
}

/// Fixed sinusoidal position table `[max_seq, d]`.
fn sinusoidal_table(max_seq: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_seq, d]);
    let data = t.data_mut();
    for p in 0..max_seq {
        for i in 0..d / 2 {
            let freq = 1.0f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            data[p * d + 2 * i] = angle.sin() as f32;
            data[p * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    t
}

/// Causal multi-head attention over flattened `[n*s, d]` activations.
///
/// Work splits across `(row, head)` pairs; each pair's score row lives in a
/// small untracked scratch buffer and every reduction runs serially in
/// position order, so results are independent of scheduling.
fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n: usize,
    s: usize,
    heads: usize,
) -> Tensor {
    let d = q.shape()[1];
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut ctx = Tensor::zeros(&[n * s, d]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // SAFETY of the parallel write: each (row, head) task writes only the
    // `[row*s .. (row+1)*s) x [head*hd .. (head+1)*hd)` region of `ctx`,
    // expressed here by handing each row-range out via par_chunks_mut and
    // each head its disjoint column slice.
    ctx.data_mut().par_chunks_mut(s * d).enumerate().for_each(|(row, ctx_row)| {
        let base = row * s;
        let mut scores = vec![0.0f32; s];
        for head in 0..heads {
            let col = head * hd;
            for t1 in 0..s {
                let q_vec = &qd[(base + t1) * d + col..(base + t1) * d + col + hd];
                for (t2, slot) in scores[..=t1].iter_mut().enumerate() {
                    let k_vec = &kd[(base + t2) * d + col..(base + t2) * d + col + hd];
                    let mut dot = 0.0f32;
                    for (&a, &b) in q_vec.iter().zip(k_vec) {
                        dot += a * b;
                    }
                    *slot = dot * scale;
                }
                // Softmax over the causal prefix.
                let max = scores[..=t1].iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0f32;
                for slot in scores[..=t1].iter_mut() {
                    *slot = (*slot - max).exp();
                    sum += *slot;
                }
                let inv = 1.0 / sum;
                let out = &mut ctx_row[t1 * d + col..t1 * d + col + hd];
                for (t2, &p) in scores[..=t1].iter().enumerate() {
                    let w = p * inv;
                    let v_vec = &vd[(base + t2) * d + col..(base + t2) * d + col + hd];
                    for (o, &vv) in out.iter_mut().zip(v_vec) {
                        *o += w * vv;
                    }
                }
            }
        }
    });
    ctx
}

impl ParamStore for Model {
    fn param(&self, name: &str) -> Option<&Tensor> {
        resolve(self, name, |l: &Linear, part| match part {
            "weight" => match &l.weight {
                WeightMat::Dense(w) => Some(w),
                WeightMat::Quant(_) => None,
            },
            "lora_a" => l.adapter.as_ref().map(|a| &a.a),
            "lora_b" => l.adapter.as_ref().map(|a| &a.b),
            _ => None,
        })
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        resolve_mut(self, name)
    }
}

/// Shared name → tensor resolution (immutable flavor).
fn resolve<'m>(
    m: &'m Model,
    name: &str,
    part_of: impl Fn(&'m Linear, &str) -> Option<&'m Tensor>,
) -> Option<&'m Tensor> {
    let segs: Vec<&str> = name.split('.').collect();
    match segs.as_slice() {
        ["embed", "weight"] => Some(&m.embed),
        ["final_norm", "weight"] => Some(&m.final_norm),
        ["lm_head", "weight"] => match &m.lm_head.weight {
            WeightMat::Dense(w) => Some(w),
            WeightMat::Quant(_) => None,
        },
        ["blocks", i, rest @ ..] => {
            let b = m.blocks.get(i.parse::<usize>().ok()?)?;
            match rest {
                ["attn_norm", "weight"] => Some(&b.attn_norm),
                ["mlp_norm", "weight"] => Some(&b.mlp_norm),
                ["attn", w, part] => {
                    let lin = match *w {
                        "wq" => &b.wq,
                        "wk" => &b.wk,
                        "wv" => &b.wv,
                        "wo" => &b.wo,
                        _ => return None,
                    };
                    part_of(lin, part)
                }
                ["mlp", w, part] => {
                    let lin = match *w {
                        "up" => &b.up,
                        "down" => &b.down,
                        _ => return None,
                    };
                    part_of(lin, part)
                }
                _ => None,
            }
        }
        _ => None,
    }
}

fn resolve_mut<'m>(m: &'m mut Model, name: &str) -> Option<&'m mut Tensor> {
    let segs: Vec<&str> = name.split('.').collect();
    let part_of = |l: &'m mut Linear, part: &str| -> Option<&'m mut Tensor> {
        match part {
            "weight" => match &mut l.weight {
                WeightMat::Dense(w) => Some(w),
                WeightMat::Quant(_) => None,
            },
            "lora_a" => l.adapter.as_mut().map(|a| &mut a.a),
            "lora_b" => l.adapter.as_mut().map(|a| &mut a.b),
            _ => None,
        }
    };
    match segs.as_slice() {
        ["embed", "weight"] => Some(&mut m.embed),
        ["final_norm", "weight"] => Some(&mut m.final_norm),
        ["lm_head", "weight"] => match &mut m.lm_head.weight {
            WeightMat::Dense(w) => Some(w),
            WeightMat::Quant(_) => None,
        },
        ["blocks", i, rest @ ..] => {
            let b = m.blocks.get_mut(i.parse::<usize>().ok()?)?;
            match rest {
                ["attn_norm", "weight"] => Some(&mut b.attn_norm),
                ["mlp_norm", "weight"] => Some(&mut b.mlp_norm),
                ["attn", w, part] => {
                    let lin = match *w {
                        "wq" => &mut b.wq,
                        "wk" => &mut b.wk,
                        "wv" => &mut b.wv,
                        "wo" => &mut b.wo,
                        _ => return None,
                    };
                    part_of(lin, part)
                }
                ["mlp", w, part] => {
                    let lin = match *w {
                        "up" => &mut b.up,
                        "down" => &mut b.down,
                        _ => return None,
                    };
                    part_of(lin, part)
                }
                _ => None,
            }
        }
        _ => None,
    }
}

/// Iterate every stored tensor with its name, in checkpoint order.
/// Used by the checkpoint writer; includes frozen and quantized weights.
pub(crate) fn visit_weights(m: &Model) -> Vec<(String, &WeightMat)> {
    let mut out: Vec<(String, &WeightMat)> = Vec::new();
    for (i, b) in m.blocks.iter().enumerate() {
        for (w, lin) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
            out.push((format!("blocks.{i}.attn.{w}.weight"), &lin.weight));
        }
        out.push((format!("blocks.{i}.mlp.up.weight"), &b.up.weight));
        out.push((format!("blocks.{i}.mlp.down.weight"), &b.down.weight));
    }
    out.push(("lm_head.weight".to_string(), &m.lm_head.weight));
    out
}

/// Iterate every plain float tensor with its name, in checkpoint order
/// (everything except the projection weights handled by `visit_weights`).
pub(crate) fn visit_float_tensors(m: &Model) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![("embed.weight".into(), &m.embed)];
    for (i, b) in m.blocks.iter().enumerate() {
        out.push((format!("blocks.{i}.attn_norm.weight"), &b.attn_norm));
        out.push((format!("blocks.{i}.mlp_norm.weight"), &b.mlp_norm));
        for t in m.config.targets_in_order() {
            let lin = match t {
                LoraTarget::Query => &b.wq,
                LoraTarget::Key => &b.wk,
                LoraTarget::Value => &b.wv,
                LoraTarget::Output => &b.wo,
                LoraTarget::MlpUp => &b.up,
                LoraTarget::MlpDown => &b.down,
            };
            let ad = lin.adapter.as_ref().expect("configured target has adapter");
            out.push((format!("blocks.{i}.{}.lora_a", t.path()), &ad.a));
            out.push((format!("blocks.{i}.{}.lora_b", t.path()), &ad.b));
        }
    }
    out.push(("final_norm.weight".into(), &m.final_norm));
    out
}

/// Mutable access for the checkpoint loader: place a loaded weight matrix.
pub(crate) fn place_weight(m: &mut Model, name: &str, w: WeightMat) -> Result<()> {
    let segs: Vec<&str> = name.split('.').collect();
    let slot: &mut Linear = match segs.as_slice() {
        ["lm_head", "weight"] => &mut m.lm_head,
        ["blocks", i, "attn", which, "weight"] => {
            let b = m
                .blocks
                .get_mut(i.parse::<usize>().map_err(|_| bad_name(name))?)
                .ok_or_else(|| bad_name(name))?;
            match *which {
                "wq" => &mut b.wq,
                "wk" => &mut b.wk,
                "wv" => &mut b.wv,
                "wo" => &mut b.wo,
                _ => return Err(bad_name(name)),
            }
        }
        ["blocks", i, "mlp", which, "weight"] => {
            let b = m
                .blocks
                .get_mut(i.parse::<usize>().map_err(|_| bad_name(name))?)
                .ok_or_else(|| bad_name(name))?;
            match *which {
                "up" => &mut b.up,
                "down" => &mut b.down,
                _ => return Err(bad_name(name)),
            }
        }
        _ => return Err(bad_name(name)),
    };
    if slot.weight.shape() != w.shape() {
        return Err(Error::Data(format!(
            "checkpoint weight '{name}' has shape {:?}, model expects {:?}",
            w.shape(),
            slot.weight.shape()
        )));
    }
    slot.weight = w;
    Ok(())
}

fn bad_name(name: &str) -> Error {
    Error::Data(format!("unknown tensor name '{name}' in checkpoint"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 32,
            max_seq_len: 64,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_targets: default_targets(),
        }
    }

    fn tiny_batch(seed: u64, rows: usize, len: usize, vocab: u32) -> Batch {
        let mut s = RngStream::new(seed);
        let data: Vec<Vec<u32>> = (0..rows)
            .map(|_| (0..len).map(|_| s.next_below(vocab as u64) as u32).collect())
            .collect();
        let labels: Vec<u32> = (0..rows).map(|_| s.next_below(vocab as u64) as u32).collect();
        Batch::new(&data, &labels, None).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.lora_rank = 64;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.lora_targets = vec![LoraTarget::Query, LoraTarget::Query];
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_initializes_identical_models() {
        let c = tiny_config();
        let a = Model::init(&c, 7).unwrap();
        let b = Model::init(&c, 7).unwrap();
        for (name, t) in visit_float_tensors(&a) {
            assert_eq!(t.data(), b.param(&name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn adapter_b_starts_at_exactly_zero() {
        let m = Model::init(&tiny_config(), 3).unwrap();
        for name in m.lora_b_names() {
            assert!(m.param(&name).unwrap().data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = Model::init(&tiny_config(), 11).unwrap();
        let batch = tiny_batch(5, 64, 12, 32);
        let losses = m.forward_loss(&batch, None).unwrap();
        let expect = (32.0f64).ln();
        // Per-row loss fluctuates with the random label; the batch mean
        // must sit near the uniform-distribution loss, and no single row
        // may blow up.
        let mean = losses.data().iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64;
        assert!((mean - expect).abs() < 0.5, "mean loss {mean} vs ln(32) {expect}");
        for &l in losses.data() {
            assert!((l as f64) < expect + 4.0, "row loss {l} blew up");
        }
    }

    #[test]
    fn fresh_model_loss_is_invariant_to_adapter_a() {
        let c = tiny_config();
        let m1 = Model::init(&c, 2).unwrap();
        let mut m2 = m1.clone();
        // Scramble every A half; with B = 0 the adapter branch contributes
        // exactly nothing either way.
        let names: Vec<String> =
            m2.lora_b_names().iter().map(|n| n.replace("lora_b", "lora_a")).collect();
        let mut stream = RngStream::new(999);
        for n in names {
            let t = m2.param_mut(&n).unwrap();
            stream.fill_normal(t.data_mut());
        }
        let batch = tiny_batch(8, 4, 10, 32);
        let a = m1.forward_loss(&batch, None).unwrap();
        let b = m2.forward_loss(&batch, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn padding_never_changes_per_row_losses() {
        let m = Model::init(&tiny_config(), 4).unwrap();
        let mut s = RngStream::new(17);
        let rows: Vec<Vec<u32>> =
            (0..5).map(|i| (0..6 + i).map(|_| s.next_below(32) as u32).collect()).collect();
        let labels: Vec<u32> = (0..5).map(|_| s.next_below(32) as u32).collect();
        let short = Batch::new(&rows, &labels, None).unwrap();
        let long = Batch::new(&rows, &labels, Some(24)).unwrap();
        let a = m.forward_loss(&short, None).unwrap();
        let b = m.forward_loss(&long, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn master_b_and_identical_override_agree_bitwise() {
        let mut m = Model::init(&tiny_config(), 6).unwrap();
        // Move B off zero so the branch is live.
        let names = m.lora_b_names();
        let mut stream = RngStream::new(31);
        for n in &names {
            let t = m.param_mut(n).unwrap();
            let mut noise = vec![0.0f32; t.len()];
            stream.fill_normal(&mut noise);
            for (x, z) in t.data_mut().iter_mut().zip(noise) {
                *x = 0.05 * z;
            }
        }
        let batch = tiny_batch(9, 6, 8, 32);
        let base = m.forward_loss(&batch, None).unwrap();
        let ov: BOverrides =
            names.iter().map(|n| (n.clone(), m.param(n).unwrap().clone())).collect();
        let with_ov = m.forward_loss(&batch, Some(&ov)).unwrap();
        assert_eq!(base.data(), with_ov.data());
    }

    #[test]
    fn override_validation_rejects_incomplete_or_uneven_maps() {
        let m = Model::init(&tiny_config(), 6).unwrap();
        let batch = tiny_batch(9, 6, 8, 32);
        let names = m.lora_b_names();
        // Missing adapters.
        let mut ov = BOverrides::new();
        ov.insert(names[0].clone(), m.param(&names[0]).unwrap().clone());
        assert!(m.forward_loss(&batch, Some(&ov)).is_err());
        // Group count not dividing rows.
        let full: BOverrides = names
            .iter()
            .map(|n| {
                let t = m.param(n).unwrap();
                let stacked = Tensor::zeros(&[4, t.shape()[0], t.shape()[1]]);
                (n.clone(), stacked)
            })
            .collect();
        assert!(m.forward_loss(&batch, Some(&full)).is_err());
    }

    #[test]
    fn loss_per_copy_means_groups_in_order() {
        let losses = Tensor::from_vec(&[6], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let means = loss_per_copy(&losses, 3).unwrap();
        assert_eq!(means, vec![1.5, 3.5, 5.5]);
        assert!(loss_per_copy(&losses, 4).is_err());
    }

    #[test]
    fn duplicate_repeats_rows_group_wise() {
        let b = Batch::new(&[vec![1, 2], vec![3, 4, 5]], &[7, 8], None).unwrap();
        let d = b.duplicate(3);
        assert_eq!(d.n_rows(), 6);
        for g in 0..3 {
            assert_eq!(d.label(g * 2), 7);
            assert_eq!(d.label(g * 2 + 1), 8);
            assert_eq!(d.row_len(g * 2), 2);
            assert_eq!(d.row_len(g * 2 + 1), 3);
        }
    }

    #[test]
    fn forward_counter_increments_once_per_pass() {
        let m = Model::init(&tiny_config(), 1).unwrap();
        let batch = tiny_batch(2, 2, 4, 32);
        let before = forward_passes();
        let _ = m.forward_loss(&batch, None).unwrap();
        let _ = m.forward_loss(&batch, None).unwrap();
        assert_eq!(forward_passes() - before, 2);
    }
}
