//! Stateful stacked execution: one forward per step, no re-perturbation.
//!
//! [`master_step`](crate::parallel::master_step) in inner mode already
//! reaches one forward per step, but it rebuilds the whole `2q`-slice
//! adapter stack from the master copies every step. This module keeps the
//! stack *alive across steps* and never touches the masters during
//! training: each step runs one forward over the standing stack, harvests
//! the projected gradients, and then advances every slice in place with a
//! single fused pass that
//!
//! 1. strips the old noise (recovered from the slice pair itself, no
//!    regeneration: `ε z_i = (stack[2i] − stack[2i+1]) / 2`),
//! 2. applies this step's update `−(η/q) Σ_j g_j z_j`, and
//! 3. plants the next step's noise.
//!
//! After any number of steps the trained master is recovered as the
//! midpoint of any slice pair. The trajectory tracks the master-mode
//! trajectory to floating-point round-off — the pair midpoint and the
//! explicitly-updated master differ only in rounding order — which the
//! equivalence tests bound over multi-step runs.

use crate::error::{Error, Result};
use crate::model::{loss_per_copy, BOverrides, Batch, Model};
use crate::parallel::stacked_overrides;
use crate::rng::RngStream;
use crate::zo::{ParamSet, ParamStore, SeedSchedule, ZoStep};

/// The standing `2q`-slice adapter stack and its bookkeeping.
#[derive(Debug)]
pub struct DualState {
    set: ParamSet,
    stack: BOverrides,
    /// Seeds whose noise the stack currently carries (next harvest).
    seeds: Vec<u64>,
    q: usize,
    eps: f32,
    lr: f32,
    next_step: u64,
}

impl DualState {
    /// Plant the stack for step 0 from the model's master adapters.
    pub fn new(
        model: &Model,
        q: usize,
        eps: f32,
        lr: f32,
        schedule: &SeedSchedule,
    ) -> Result<DualState> {
        if q == 0 {
            return Err(Error::Config("query count q must be at least 1".into()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("perturbation scale must be positive, got {eps}")));
        }
        let set = model.lora_b_param_set();
        let seeds: Vec<u64> = (0..q).map(|i| schedule.query_seed(0, i)).collect();
        let stack = stacked_overrides(model, &set, &seeds, eps, true)?;
        Ok(DualState { set, stack, seeds, q, eps, lr, next_step: 0 })
    }

    /// Index of the step the next [`step`](DualState::step) call will run.
    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    /// One training step: a single forward over the standing stack, then
    /// the in-place advance. The model's master adapters are read-only
    /// here — they change only at [`finalize`](DualState::finalize).
    pub fn step(
        &mut self,
        model: &Model,
        batch: &Batch,
        schedule: &SeedSchedule,
    ) -> Result<ZoStep> {
        let q = self.q;
        let dup = batch.duplicate(2 * q);
        let per_copy = loss_per_copy(&model.forward_loss(&dup, Some(&self.stack))?, 2 * q)?;
        let loss_plus: Vec<f64> = (0..q).map(|i| per_copy[2 * i]).collect();
        let loss_minus: Vec<f64> = (0..q).map(|i| per_copy[2 * i + 1]).collect();
        for (i, (&p, &m)) in loss_plus.iter().zip(&loss_minus).enumerate() {
            if !p.is_finite() || !m.is_finite() {
                return Err(Error::Numeric(format!(
                    "query {i} losses evaluated to ({p}, {m}); stack left unadvanced"
                )));
            }
        }
        let projected_grads: Vec<f64> = loss_plus
            .iter()
            .zip(&loss_minus)
            .map(|(&p, &m)| (p - m) / (2.0 * self.eps as f64))
            .collect();

        let harvest_seeds = self.seeds.clone();
        let next_seeds: Vec<u64> =
            (0..q).map(|i| schedule.query_seed(self.next_step + 1, i)).collect();
        self.advance(&projected_grads, &next_seeds);
        self.seeds = next_seeds;
        self.next_step += 1;
        Ok(ZoStep { seeds: harvest_seeds, loss_plus, loss_minus, projected_grads })
    }

    /// Fused in-place stack advance: strip old noise, apply the update,
    /// plant new noise — one pass over each slice.
    fn advance(&mut self, grads: &[f64], next_seeds: &[u64]) {
        let q = self.q;
        // Per-query update coefficient on the *recovered* noise:
        // update = (η/q) Σ_j g_j z_j  and  ε z_j = diff_j, so each diff_j
        // enters with weight (η g_j) / (q ε).
        let coeffs: Vec<f32> = grads
            .iter()
            .map(|&g| ((self.lr as f64 / q as f64) * g / self.eps as f64) as f32)
            .collect();
        for (idx, name) in self.set.names().iter().enumerate() {
            let stacked = self.stack.get_mut(name).expect("stack covers the set");
            let sz: usize = stacked.len() / (2 * q);
            // Recover ε z_j for every pair from the stack itself.
            let mut diffs = vec![0.0f32; q * sz];
            {
                let s = stacked.data();
                for i in 0..q {
                    let (p, m) =
                        (&s[2 * i * sz..(2 * i + 1) * sz], &s[(2 * i + 1) * sz..(2 * i + 2) * sz]);
                    for (d, (&a, &b)) in diffs[i * sz..(i + 1) * sz].iter_mut().zip(p.iter().zip(m))
                    {
                        *d = (a - b) / 2.0;
                    }
                }
            }
            // This step's update, shared by every slice.
            let mut update = vec![0.0f32; sz];
            for i in 0..q {
                let c = coeffs[i];
                for (u, &d) in update.iter_mut().zip(&diffs[i * sz..(i + 1) * sz]) {
                    *u += c * d;
                }
            }
            // Advance each pair: ±(new noise) around the updated midpoint.
            let mut noise = vec![0.0f32; sz];
            for i in 0..q {
                let mut stream =
                    RngStream::at_normal_offset(next_seeds[i], self.set.normal_offset(idx));
                stream.fill_normal(&mut noise);
                let s = stacked.data_mut();
                for e in 0..sz {
                    let d = diffs[i * sz + e];
                    let u = update[e];
                    let z = self.eps * noise[e];
                    s[2 * i * sz + e] += -d - u + z;
                    s[(2 * i + 1) * sz + e] += d - u - z;
                }
            }
        }
    }

    /// Write the trained master adapters back into the model: the midpoint
    /// of each slice pair (pair 0 is used; all pairs share the midpoint up
    /// to round-off).
    pub fn finalize(&self, model: &mut Model) -> Result<()> {
        for name in self.set.names() {
            let stacked = &self.stack[name];
            let sz = stacked.len() / (2 * self.q);
            let master = model
                .param_mut(name)
                .ok_or_else(|| Error::Config(format!("adapter '{name}' missing at finalize")))?;
            let s = stacked.data();
            for (e, slot) in master.data_mut().iter_mut().enumerate() {
                *slot = 0.5 * (s[e] + s[sz + e]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_passes, LoraTarget, Model, ModelConfig};
    use crate::parallel::{master_step, ParallelMode};
    use crate::rng::RngStream;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 16,
            max_seq_len: 16,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpDown],
        }
    }

    fn batch() -> Batch {
        let mut s = RngStream::new(300);
        let rows: Vec<Vec<u32>> =
            (0..4).map(|_| (0..8).map(|_| s.next_below(16) as u32).collect()).collect();
        let labels: Vec<u32> = (0..4).map(|_| s.next_below(16) as u32).collect();
        Batch::new(&rows, &labels, None).unwrap()
    }

    #[test]
    fn finalize_without_steps_recovers_the_master() {
        let mut m = Model::init(&cfg(), 8).unwrap();
        // Move B off zero so recovery is non-trivial.
        let set = m.lora_b_param_set();
        crate::zo::perturb_parameters(&mut m, &set, 0.05, 999);
        let before: Vec<f32> = set.flatten(&m);
        let state = DualState::new(&m, 3, 1e-2, 0.5, &SeedSchedule::new(1)).unwrap();
        let mut m2 = m.clone();
        state.finalize(&mut m2).unwrap();
        for (&a, &b) in before.iter().zip(set.flatten(&m2).iter()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn first_step_losses_match_master_mode_bitwise() {
        let m = Model::init(&cfg(), 9).unwrap();
        let b = batch();
        let sched = SeedSchedule::new(21);
        let mut state = DualState::new(&m, 2, 1e-2, 0.5, &sched).unwrap();
        let s_dual = state.step(&m, &b, &sched).unwrap();
        let mut m2 = m.clone();
        let set = m2.lora_b_param_set();
        let s_master =
            master_step(&mut m2, &set, &b, 2, 1e-2, 0.5, &sched, 0, ParallelMode::Inner).unwrap();
        assert_eq!(s_dual.loss_plus, s_master.loss_plus);
        assert_eq!(s_dual.loss_minus, s_master.loss_minus);
        assert_eq!(s_dual.seeds, s_master.seeds);
    }

    #[test]
    fn five_step_trajectory_tracks_master_mode() {
        let m0 = Model::init(&cfg(), 10).unwrap();
        let b = batch();
        let sched = SeedSchedule::new(33);
        let set = m0.lora_b_param_set();
        let (q, eps, lr) = (2, 1e-2, 0.05);

        let mut master = m0.clone();
        for step in 0..5 {
            master_step(&mut master, &set, &b, q, eps, lr, &sched, step, ParallelMode::Inner)
                .unwrap();
        }
        let mut dual_model = m0.clone();
        let mut state = DualState::new(&dual_model, q, eps, lr, &sched).unwrap();
        for _ in 0..5 {
            state.step(&dual_model, &b, &sched).unwrap();
        }
        state.finalize(&mut dual_model).unwrap();

        for name in set.names() {
            let a = master.param(name).unwrap().data();
            let c = dual_model.param(name).unwrap().data();
            for (&x, &y) in a.iter().zip(c) {
                assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn one_forward_per_step() {
        let m = Model::init(&cfg(), 11).unwrap();
        let b = batch();
        let sched = SeedSchedule::new(5);
        let mut state = DualState::new(&m, 4, 1e-2, 0.1, &sched).unwrap();
        let before = forward_passes();
        for _ in 0..3 {
            state.step(&m, &b, &sched).unwrap();
        }
        assert_eq!(forward_passes() - before, 3);
    }

    #[test]
    fn masters_untouched_until_finalize() {
        let mut m = Model::init(&cfg(), 12).unwrap();
        let set = m.lora_b_param_set();
        crate::zo::perturb_parameters(&mut m, &set, 0.05, 4242);
        let before = set.flatten(&m);
        let b = batch();
        let sched = SeedSchedule::new(7);
        let mut state = DualState::new(&m, 2, 1e-2, 0.5, &sched).unwrap();
        for _ in 0..3 {
            state.step(&m, &b, &sched).unwrap();
        }
        assert_eq!(before, set.flatten(&m));
        state.finalize(&mut m).unwrap();
        assert_ne!(before, set.flatten(&m));
    }
}
