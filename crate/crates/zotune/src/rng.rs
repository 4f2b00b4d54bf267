//! Deterministic counter-based random number generation.
//!
//! Everything random in this crate — weight initialization, perturbation
//! noise, synthetic data — flows through [`RngStream`], a counter-based
//! generator: draw `i` of a stream is a pure function of `(seed, i)` and
//! nothing else. That buys three properties the training algorithms depend
//! on:
//!
//! * **Regeneration.** A perturbation applied with seed `s` can be exactly
//!   re-derived later from `s` alone, so noise never has to be stored.
//! * **Random access.** A stream can be opened at any offset in O(1), which
//!   lets each adapter layer regenerate its own slice of a shared noise
//!   schedule in isolation.
//! * **Order independence.** Filling a buffer in parallel gives bitwise the
//!   same result as filling it serially, because each element's value is
//!   indexed, not sequenced.
//!
//! The generator is the SplitMix64 sequence: draw `i` is the SplitMix64
//! finalizer applied to `seed + (i+1)·0x9E3779B97F4A7C15` (wrapping). Normal
//! deviates use the Box–Muller transform; each normal draw consumes exactly
//! two uniform draws (the sine companion is discarded), so the counter
//! position stays a pure function of how many values were drawn.
//!
//! The exact bit stream is frozen: tests pin expected values, and checkpoint
//! and trajectory reproducibility inside this crate relies on it. It makes
//! no portability promise beyond this crate.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a 64-bit avalanching bijection.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw `counter` of the stream with the given seed.
#[inline]
fn draw(seed: u64, counter: u64) -> u64 {
    finalize(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Derive a new seed from a parent seed and a payload.
///
/// Used for every seed-derivation need in the crate (per-query seeds,
/// per-split dataset seeds, weight-init seeds) so that distinct purposes get
/// statistically independent streams from one run seed.
pub fn mix(a: u64, b: u64) -> u64 {
    finalize(finalize(a ^ 0x5851_F42D_4C95_7F2D).wrapping_add(b))
}

/// Three-way [`mix`].
pub fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix(mix(a, b), c)
}

/// A deterministic stream of random values: a seed plus a draw counter.
///
/// The counter counts *uniform* 64-bit draws. A normal draw consumes two,
/// so after drawing `n` normals the counter has advanced by `2n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    /// Open the stream for `seed` at position zero.
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Open the stream for `seed` positioned so the next normal draw is
    /// normal number `normal_offset` of the stream.
    pub fn at_normal_offset(seed: u64, normal_offset: u64) -> Self {
        RngStream { seed, counter: 2 * normal_offset }
    }

    /// Uniform-draw position.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next uniform 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        let v = draw(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Next uniform draw in the half-open interval `(0, 1]`.
    ///
    /// The open lower end makes `ln(u)` safe in the Box–Muller transform.
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64();
        // Top 53 bits, shifted into (0, 1] by adding 1 before scaling.
        ((bits >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in `[0, n)` via the widening-multiply method.
    ///
    /// The modulo bias is at most `n / 2^64`, far below anything observable;
    /// the method is used because it is branch-free and deterministic.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Next standard-normal draw (Box–Muller, cosine branch).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal draw number `idx` of this stream, without touching the
    /// counter. `fill_normal` uses this to fill buffers out of order.
    fn normal_at(&self, idx: u64) -> f64 {
        let base = self.counter + 2 * idx;
        let u1 = ((draw(self.seed, base) >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = ((draw(self.seed, base + 1) >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fill `out` with standard-normal values (as `f32`) and advance the
    /// counter by `2 * out.len()`.
    ///
    /// Element `j` always receives normal draw `current + j`, so the result
    /// is independent of how the fill is scheduled.
    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.normal_at(j as u64) as f32;
        }
        self.counter += 2 * out.len() as u64;
    }
}
