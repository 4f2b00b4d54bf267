//! Independent reference gradients for verifying the estimator.
//!
//! Everything here exists to be *distrusted separately* from the optimizer:
//! [`fd_gradient`] brute-forces the gradient one coordinate at a time using
//! only the loss function and scalar arithmetic, sharing no code with the
//! estimator's projection/update path. [`exact_two_sided`] evaluates the
//! two-sided losses for a query seed the way the mathematics defines them —
//! both sides measured from a snapshot of the *same* starting parameters —
//! rather than the production path's in-place `+ε, −2ε, +ε` walk, whose
//! round-off residue would otherwise dominate tight equivalence checks.
//! [`bias_variance_experiment`] measures the estimator's empirical mean and
//! per-component variance against the finite-difference reference.

use crate::error::{Error, Result};
use crate::rng::{mix, RngStream};
use crate::zo::{perturb_parameters, ParamSet, ParamStore, SeedSchedule};

/// Settings for a finite-difference gradient run.
#[derive(Debug, Clone, Copy)]
pub struct FdSpec {
    /// Coordinate step. `1e-4` balances truncation against f32 rounding.
    pub h: f64,
    /// Central differences when true (the default); forward differences
    /// otherwise (half the cost, first-order accurate only).
    pub central: bool,
}

impl Default for FdSpec {
    fn default() -> Self {
        FdSpec { h: 1e-4, central: true }
    }
}

/// Coordinate-wise finite-difference gradient over a parameter set.
///
/// For every coordinate: nudge, evaluate, restore bitwise (the original
/// value is saved, not re-derived). The difference quotient divides by the
/// *realized* f32 step — `(θ+h) − (θ−h)` as stored — not the nominal `2h`,
/// which removes the quantization of `h` itself from the error. Returns the
/// flat gradient in [`ParamSet::flatten`] layout; `θ` is restored exactly.
pub fn fd_gradient<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    spec: FdSpec,
) -> Result<Vec<f64>> {
    if !(spec.h > 0.0) || !spec.h.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            spec.h
        )));
    }
    let base_loss = if spec.central {
        0.0 // unused
    } else {
        check_finite(loss_fn(store)?)?
    };
    let mut grad = Vec::with_capacity(set.dim());
    for name in set.names().to_vec() {
        let n = store.param(&name).expect("validated at construction").len();
        for j in 0..n {
            let original = store.param(&name).unwrap().data()[j];
            let hi = original + spec.h as f32;
            store.param_mut(&name).unwrap().data_mut()[j] = hi;
            let loss_hi = check_finite(loss_fn(store)?)?;
            let g = if spec.central {
                let lo = original - spec.h as f32;
                store.param_mut(&name).unwrap().data_mut()[j] = lo;
                let loss_lo = check_finite(loss_fn(store)?)?;
                (loss_hi - loss_lo) / (hi as f64 - lo as f64)
            } else {
                (loss_hi - base_loss) / (hi as f64 - original as f64)
            };
            store.param_mut(&name).unwrap().data_mut()[j] = original;
            grad.push(g);
        }
    }
    Ok(grad)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("oracle loss evaluated to {v}")))
    }
}

/// The two-sided losses `(L(θ+εz), L(θ−εz))` for one query seed, each side
/// measured from a bitwise snapshot of `θ`.
///
/// This is the definitional evaluation the in-place production walk
/// approximates. Both perturbed points here carry identical bits to the
/// slices a stacked forward builds (`θ + (−ε)·z` and `θ − εz` round
/// identically), so estimator-vs-oracle comparisons are limited only by
/// genuine algorithmic differences, never by restore drift.
pub fn exact_two_sided<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    eps: f32,
    seed: u64,
) -> Result<(f64, f64)> {
    let snapshot = set.flatten(store);
    perturb_parameters(store, set, eps, seed);
    let plus = loss_fn(store);
    set.unflatten(store, &snapshot)?;
    let plus = check_finite(plus?)?;
    perturb_parameters(store, set, -eps, seed);
    let minus = loss_fn(store);
    set.unflatten(store, &snapshot)?;
    let minus = check_finite(minus?)?;
    Ok((plus, minus))
}

/// Per-query-count results of a bias/variance measurement.
#[derive(Debug, Clone)]
pub struct QueryReport {
    pub q: usize,
    /// Empirical mean of the flat gradient estimates.
    pub mean_estimate: Vec<f64>,
    /// Cosine similarity of the mean estimate against the reference
    /// finite-difference gradient.
    pub cosine_vs_reference: f64,
    /// Per-component sample variance, averaged over components.
    pub mean_component_variance: f64,
}

/// Result of [`bias_variance_experiment`]: the reference gradient plus one
/// [`QueryReport`] per requested query count.
#[derive(Debug, Clone)]
pub struct BiasVarianceReport {
    pub reference: Vec<f64>,
    pub n_samples: usize,
    pub eps: f32,
    pub per_q: Vec<QueryReport>,
}

impl BiasVarianceReport {
    /// Rows of a plain-text summary table (one per query count).
    pub fn table(&self) -> Vec<String> {
        let mut rows = vec![format!(
            "q    cosine(mean, reference)    mean component variance    (n={}, eps={})",
            self.n_samples, self.eps
        )];
        for r in &self.per_q {
            rows.push(format!(
                "{:<4} {:<26.6} {:<26.6e}",
                r.q, r.cosine_vs_reference, r.mean_component_variance
            ));
        }
        rows
    }
}

/// Measure estimator bias and variance against the finite-difference
/// reference on a fixed store and loss.
///
/// For each `q` in `q_list`, draws `n_samples` independent estimates
/// (sample `s` uses the seed schedule's step `s`, so the draw set is
/// deterministic in `base_seed`), accumulating the running mean and the
/// per-component variance in `f64`. `θ` is left as found.
pub fn bias_variance_experiment<S: ParamStore>(
    store: &mut S,
    set: &ParamSet,
    loss_fn: &mut dyn FnMut(&S) -> Result<f64>,
    q_list: &[usize],
    eps: f32,
    n_samples: usize,
    base_seed: u64,
) -> Result<BiasVarianceReport> {
    if n_samples < 2 {
        return Err(Error::Config("bias/variance experiment needs at least 2 samples".into()));
    }
    let reference = fd_gradient(store, set, loss_fn, FdSpec::default())?;
    let d = set.dim();
    let mut per_q = Vec::with_capacity(q_list.len());
    for (qi, &q) in q_list.iter().enumerate() {
        let schedule = SeedSchedule::new(mix(base_seed, qi as u64));
        let mut sum = vec![0.0f64; d];
        let mut sum_sq = vec![0.0f64; d];
        for sample in 0..n_samples {
            let (est, _) =
                crate::zo::rge_estimate(store, set, loss_fn, q, eps, &schedule, sample as u64)?;
            for ((s, ss), &e) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(est.iter()) {
                *s += e;
                *ss += e * e;
            }
        }
        let n = n_samples as f64;
        let mean_estimate: Vec<f64> = sum.iter().map(|&s| s / n).collect();
        let mean_component_variance = sum_sq
            .iter()
            .zip(&mean_estimate)
            .map(|(&ss, &m)| (ss / n - m * m) * n / (n - 1.0))
            .sum::<f64>()
            / d as f64;
        per_q.push(QueryReport {
            q,
            cosine_vs_reference: cosine(&mean_estimate, &reference),
            mean_component_variance,
            mean_estimate,
        });
    }
    Ok(BiasVarianceReport { reference, n_samples, eps, per_q })
}

/// Cosine similarity of two flat vectors (0 when either is all-zero).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Dot product of a flat `f64` gradient with the noise vector of a seed,
/// regenerated over the set's stream (the same draws the estimator uses).
pub fn dot_with_noise(grad: &[f64], seed: u64) -> f64 {
    let mut stream = RngStream::new(seed);
    grad.iter().map(|&g| g * stream.next_normal()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zo::VecStore;

    fn quadratic(s: &VecStore) -> Result<f64> {
        Ok(s.values().iter().map(|&v| 0.5 * v as f64 * v as f64).sum())
    }

    #[test]
    fn fd_on_quadratic_recovers_theta() {
        let mut store = VecStore::new(vec![1.0, -2.0, 0.5, 3.0]);
        let set = store.param_set();
        let grad = fd_gradient(&mut store, &set, &mut quadratic, FdSpec::default()).unwrap();
        for (g, &t) in grad.iter().zip(store.values()) {
            assert!((g - t as f64).abs() <= 1e-6 * (1.0 + t.abs() as f64), "{g} vs {t}");
        }
    }

    #[test]
    fn fd_on_linear_loss_is_near_exact() {
        let c = [0.3f64, -1.2, 2.0];
        let mut store = VecStore::new(vec![0.7, 0.1, -0.4]);
        let set = store.param_set();
        let mut loss = |s: &VecStore| -> Result<f64> {
            Ok(s.values().iter().zip(&c).map(|(&v, &ci)| v as f64 * ci).sum())
        };
        let grad = fd_gradient(&mut store, &set, &mut loss, FdSpec::default()).unwrap();
        for (g, &ci) in grad.iter().zip(&c) {
            assert!((g - ci).abs() <= 1e-8 * (1.0 + ci.abs()), "{g} vs {ci}");
        }
    }

    #[test]
    fn fd_restores_theta_bitwise() {
        let mut store = VecStore::new(vec![0.25, -0.5, 1.5]);
        let set = store.param_set();
        let before = set.flatten(&store);
        fd_gradient(&mut store, &set, &mut quadratic, FdSpec::default()).unwrap();
        assert_eq!(before, set.flatten(&store));
    }

    #[test]
    fn forward_differences_are_first_order_close() {
        let mut store = VecStore::new(vec![1.0, 2.0]);
        let set = store.param_set();
        let spec = FdSpec { h: 1e-4, central: false };
        let grad = fd_gradient(&mut store, &set, &mut quadratic, spec).unwrap();
        for (g, &t) in grad.iter().zip(store.values()) {
            // One-sided error is O(h) on the quadratic.
            assert!((g - t as f64).abs() <= 1e-3, "{g} vs {t}");
        }
    }

    #[test]
    fn exact_two_sided_restores_bitwise_and_is_symmetric_for_even_loss() {
        let mut store = VecStore::new(vec![0.0; 16]);
        let set = store.param_set();
        let before = set.flatten(&store);
        // At θ = 0 a pure quadratic sees the same loss on both sides.
        let (plus, minus) = exact_two_sided(&mut store, &set, &mut quadratic, 1e-2, 99).unwrap();
        assert_eq!(plus, minus);
        assert_eq!(before, set.flatten(&store));
    }

    #[test]
    fn bias_variance_on_quadratic_shows_unbiasedness_and_1_over_q() {
        let mut store = VecStore::new((0..10).map(|i| 0.3 * i as f32 - 1.5).collect());
        let set = store.param_set();
        let report =
            bias_variance_experiment(&mut store, &set, &mut quadratic, &[1, 4], 1e-3, 4000, 12)
                .unwrap();
        assert!(
            report.per_q[0].cosine_vs_reference > 0.98,
            "{}",
            report.per_q[0].cosine_vs_reference
        );
        let ratio =
            report.per_q[1].mean_component_variance / report.per_q[0].mean_component_variance;
        assert!((0.1..=0.5).contains(&ratio), "variance ratio {ratio}");
        assert_eq!(report.table().len(), 3);
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let mut store = VecStore::new(vec![1.0]);
        let set = store.param_set();
        let spec = FdSpec { h: 0.0, central: true };
        assert!(matches!(
            fd_gradient(&mut store, &set, &mut quadratic, spec),
            Err(Error::Config(_))
        ));
    }
}
