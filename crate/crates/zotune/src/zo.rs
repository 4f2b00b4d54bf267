//! Zeroth-order gradient estimation and in-place perturbation.
//!
//! The estimator never sees a backward pass. For a loss `L` and parameters
//! `θ` it forms the two-sided randomized difference quotient
//!
//! ```text
//! ĝ = (1/q) · Σ_i  (L(θ + ε z_i) − L(θ − ε z_i)) / (2ε) · z_i,   z_i ~ N(0, I)
//! ```
//!
//! averaged over `q` independent probe directions ("queries"). The estimate
//! is unbiased for the gradient of the smoothed loss and its per-component
//! variance shrinks like `1/q`; plain SGD on `ĝ` is the whole optimizer.
//!
//! The **seed trick** makes this memory-free: a probe direction `z_i` is
//! never stored. Perturbations are applied in place from a named seed, then
//! exactly undone by applying the same seed with the opposite scale, and the
//! weight update later regenerates `z_i` from the seed a third time. The
//! whole optimizer state is a handful of scalars per step.
//!
//! [`sequential_step`] is the reference optimizer built this way: it walks
//! the `q` queries one at a time, paying two full forward passes per query
//! (`2q` per step). The [`parallel`](crate::parallel) module reproduces the
//! same mathematics with far fewer passes; this module is the ground truth
//! it is checked against.

use crate::error::{Error, Result};
use crate::rng::{mix3, RngStream};
use crate::tensor::{add_noise, Tensor};

/// Read/write access to named parameter tensors.
///
/// Implemented by the transformer model and by [`VecStore`]; everything in
/// this module is generic over it so the estimator can be exercised on
/// closed-form probe functions as well as the real model.
pub trait ParamStore {
    /// Resolve a parameter name to its tensor.
    fn param(&self, name: &str) -> Option<&Tensor>;
    /// Resolve a parameter name to its tensor, mutably.
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

/// An ordered selection of parameters from a store.
///
/// The order is load-bearing: perturbations draw one noise stream across the
/// whole set, so each parameter owns a fixed slice of that stream. The
/// normal-draw offset of parameter `p` is the total element count of the
/// parameters before it — which is how the stacked-execution code regenerates
/// one layer's noise in isolation (see [`RngStream::at_normal_offset`]).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    sizes: Vec<usize>,
    dim: usize,
}

impl ParamSet {
    /// Build a set from parameter names, validating that each resolves.
    pub fn new<S: ParamStore>(store: &S, names: Vec<String>) -> Result<ParamSet> {
        if names.is_empty() {
            return Err(Error::Config("parameter set is empty".into()));
        }
        let mut sizes = Vec::with_capacity(names.len());
        let mut dim = 0usize;
        for name in &names {
            let t = store
                .param(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
            sizes.push(t.len());
            dim += t.len();
        }
        Ok(ParamSet { names, sizes, dim })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters in the set.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Element count of each parameter, in set order.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Normal-draw offset of parameter `idx` within the set's noise stream.
    pub fn normal_offset(&self, idx: usize) -> u64 {
        self.sizes[..idx].iter().map(|&s| s as u64).sum()
    }

    /// Concatenate the set's parameters into one flat vector (set order,
    /// row-major within each tensor) — the layout all flat gradient vectors
    /// in this crate use.
    pub fn flatten<S: ParamStore>(&self, store: &S) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        for name in &self.names {
            out.extend_from_slice(store.param(name).expect("validated at construction").data());
        }
        out
    }

    /// Write a flat vector back into the set's parameters.
    pub fn unflatten<S: ParamStore>(&self, store: &mut S, flat: &[f32]) -> Result<()> {
        if flat.len() != self.dim {
            return Err(Error::Shape(format!(
                "flat vector has {} elements, set has {}",
                flat.len(),
                self.dim
            )));
        }
        let mut at = 0;
        for name in &self.names {
            let t = store.param_mut(name).expect("validated at construction");
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Deterministic per-query seed derivation for a training run.
///
/// Query `i` of step `t` always perturbs with `mix3(noise_seed, t, i)`, so
/// any step's noise can be reconstructed from the run seed and the step
/// index alone.
#[derive(Debug, Clone, Copy)]
pub struct SeedSchedule {
    noise_seed: u64,
}

impl SeedSchedule {
    pub fn new(noise_seed: u64) -> Self {
        SeedSchedule { noise_seed }
    }

    pub fn query_seed(&self, step: u64, query: usize) -> u64 {
        mix3(self.noise_seed, step, query as u64)
    }
}

/// Everything one optimizer step measured: per-query seeds, the two loss
/// evaluations, and the projected gradients `(ℓ⁺ − ℓ⁻) / 2ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoStep {
    pub seeds: Vec<u64>,
    pub loss_plus: Vec<f64>,
    pub loss_minus: Vec<f64>,
    pub projected_grads: Vec<f64>,
}

/// Add `scale · z` to every parameter in `set`, where `z` is the standard
/// normal vector drawn from a fresh stream at `seed` (one stream across the
/// whole set, in set order).
///
/// Calling again with `-scale` and the same seed undoes the perturbation up
/// to floating-point round-off.
pub fn perturb_parameters<S: ParamStore>(store: &mut S, set: &ParamSet, scale: f32, seed: u64) {
    let mut stream = RngStream::new(seed);
    for name in set.names() {
        let t = store.param_mut(name).expect("validated at construction");
        add_noise(t, scale, &mut stream);
    }
}

fn check_step_args(q: usize, eps: f32) -> Result<()> {
    if q == 0 {
        return Err(Error::Config("query count q must be at least 1".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("perturbation scale must be positive, got {eps}")));
    }
    Ok(())
}

fn finite(label: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{label} evaluated to {v}")))
    }
}

/// Evaluate the two-sided losses for query seed `s`, leaving `θ` as found.
///
/// Perturbs `+ε`, evaluates, steps `−2ε` to the mirror point, evaluates,
/// then `+ε` back to center. On a non-finite loss the parameters are still
/// restored before the error is returned.
fn probe_pair<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    eps: f32,
    seed: u64,
) -> Result<(f64, f64)> {
    perturb_parameters(store, set, eps, seed);
    let plus = loss_fn(store).and_then(|v| finite("loss at +eps", v));
    let plus = match plus {
        Ok(v) => v,
        Err(e) => {
            perturb_parameters(store, set, -eps, seed);
            return Err(e);
        }
    };
    perturb_parameters(store, set, -2.0 * eps, seed);
    let minus = loss_fn(store).and_then(|v| finite("loss at -eps", v));
    perturb_parameters(store, set, eps, seed);
    Ok((plus, minus?))
}

/// One step of sequential zeroth-order SGD (the `2q`-forward reference path).
///
/// For each query: perturb in place, evaluate both sides, restore. After all
/// queries, apply `θ ← θ − (η/q) · Σ_i g_i z_i`, regenerating each `z_i`
/// from its seed. Exactly `2q` loss evaluations, no extra parameter copies.
pub fn sequential_step<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    q: usize,
    eps: f32,
    lr: f32,
    schedule: &SeedSchedule,
    step: u64,
) -> Result<ZoStep> {
    check_step_args(q, eps)?;
    let mut out = ZoStep {
        seeds: Vec::with_capacity(q),
        loss_plus: Vec::with_capacity(q),
        loss_minus: Vec::with_capacity(q),
        projected_grads: Vec::with_capacity(q),
    };
    for i in 0..q {
        let seed = schedule.query_seed(step, i);
        let (plus, minus) = probe_pair(store, set, loss_fn, eps, seed)?;
        out.seeds.push(seed);
        out.loss_plus.push(plus);
        out.loss_minus.push(minus);
        out.projected_grads.push((plus - minus) / (2.0 * eps as f64));
    }
    for i in 0..q {
        let coeff = -(lr as f64 / q as f64) * out.projected_grads[i];
        perturb_parameters(store, set, coeff as f32, out.seeds[i]);
    }
    Ok(out)
}

/// The raw gradient estimate, `θ` left untouched.
///
/// Returns the flat estimate `(1/q) Σ_i g_i z_i` in [`ParamSet::flatten`]
/// layout together with the per-query measurements. Uses `2q` loss
/// evaluations like [`sequential_step`] but applies no update.
pub fn rge_estimate<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    q: usize,
    eps: f32,
    schedule: &SeedSchedule,
    step: u64,
) -> Result<(Vec<f64>, ZoStep)> {
    check_step_args(q, eps)?;
    let mut estimate = vec![0.0f64; set.dim()];
    let mut out = ZoStep {
        seeds: Vec::with_capacity(q),
        loss_plus: Vec::with_capacity(q),
        loss_minus: Vec::with_capacity(q),
        projected_grads: Vec::with_capacity(q),
    };
    for i in 0..q {
        let seed = schedule.query_seed(step, i);
        let (plus, minus) = probe_pair(store, set, loss_fn, eps, seed)?;
        let g = (plus - minus) / (2.0 * eps as f64);
        let mut stream = RngStream::new(seed);
        for slot in estimate.iter_mut() {
            *slot += g / q as f64 * stream.next_normal();
        }
        out.seeds.push(seed);
        out.loss_plus.push(plus);
        out.loss_minus.push(minus);
        out.projected_grads.push(g);
    }
    Ok((estimate, out))
}

/// A store holding a single flat parameter vector named `"theta"`.
///
/// Lets every estimator in the crate run against closed-form probe losses
/// (quadratics, linear forms) where the true gradient is known exactly.
#[derive(Debug, Clone)]
pub struct VecStore {
    theta: Tensor,
}

/// The parameter name used by [`VecStore`].
pub const VEC_PARAM: &str = "theta";

impl VecStore {
    pub fn new(values: Vec<f32>) -> Self {
        let n = values.len();
        VecStore { theta: Tensor::from_vec(&[n], values).expect("non-empty vector") }
    }

    pub fn values(&self) -> &[f32] {
        self.theta.data()
    }

    /// The single-parameter set covering the whole vector.
    pub fn param_set(&self) -> ParamSet {
        ParamSet::new(self, vec![VEC_PARAM.to_string()]).expect("theta resolves")
    }
}

impl ParamStore for VecStore {
    fn param(&self, name: &str) -> Option<&Tensor> {
        (name == VEC_PARAM).then_some(&self.theta)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        (name == VEC_PARAM).then_some(&mut self.theta)
    }
}
