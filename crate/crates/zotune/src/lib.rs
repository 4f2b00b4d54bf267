//! Forward-only fine-tuning of small transformers.
//!
//! `zotune` trains models *without backpropagation*: it estimates gradients
//! from pairs of loss evaluations under antithetic random perturbations,
//! and updates only the trainable halves of frozen-A low-rank adapter
//! pairs. Because no activations are retained and no optimizer state
//! exists, training memory stays within a small constant factor of
//! inference memory — which is the point.
//!
//! Three execution modes evaluate the same estimator:
//!
//! * **sequential** ([`zo`]) — each perturbation probe is its own forward
//!   pass over the batch; the perturbations themselves are regenerated from
//!   per-step seeds, so parameters are nudged in place and restored rather
//!   than copied.
//! * **stacked** ([`parallel`]) — all probes run inside one (or two)
//!   forward passes over a duplicated batch, with each probe's perturbed
//!   adapter stacked into a batched matmul. Bitwise-comparable noise makes
//!   the two paths produce matching gradient estimates.
//! * **dual** ([`dual`]) — the stacked layout made stateful: perturbed
//!   copies persist across steps and each step both harvests the previous
//!   step's probes and plants the next ones, reaching one forward per
//!   training step.
//!
//! Supporting pieces: [`tensor`] (a small deterministic f32 tensor with
//! tracked allocation), [`rng`] (a counter-based Gaussian stream with O(1)
//! jumps), [`model`] (a decoder transformer with adapter pairs),
//! [`quant`] (int8 weight-only quantization), [`oracle`] (finite-difference
//! reference gradients), [`tasks`] (synthetic datasets), [`train`] /
//! [`bench`] / [`verify`] (runners), and [`checkpoint`] / [`runcfg`] /
//! [`records`] (file formats).

pub mod alloc;
pub mod bench;
pub mod checkpoint;
pub mod dual;
pub mod error;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod quant;
pub mod records;
pub mod rng;
pub mod runcfg;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zo;
