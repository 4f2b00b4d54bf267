//! Dense row-major `f32` tensors and the numeric kernels built on them.
//!
//! Design rules, chosen so that results are bit-reproducible run-to-run and
//! independent of the number of worker threads:
//!
//! * Storage is always contiguous row-major `f32`; reshapes are metadata
//!   moves and ops that need a different layout copy.
//! * Every reduction (dot products, row sums, norms) accumulates serially in
//!   a fixed index order per output element. Parallelism only ever splits
//!   *across* output elements, never inside one.
//! * Output buffers are allocated by the calling thread before any parallel
//!   work starts; worker threads only write into pre-allocated memory. This
//!   keeps the byte accounting in [`alloc`](crate::alloc) deterministic.
//! * Ops return fresh tensors; the few in-place helpers (used by the model
//!   forward to cap live memory) are exposed separately and mutate buffers
//!   with exclusive access.

use crate::alloc::TrackedVec;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use rayon::prelude::*;

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TrackedVec<f32>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// All-zeros tensor. Every dimension must be non-zero.
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor shapes must be non-empty with non-zero dims, got {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data: TrackedVec::filled(0.0, numel(shape)) }
    }

    /// Wrap an existing buffer. The length must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: TrackedVec::from_vec(data) })
    }

    /// Standard-normal tensor drawn from `stream` (advances the stream).
    pub fn gaussian(stream: &mut RngStream, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        stream.fill_normal(t.data.as_mut_slice());
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        self.data.as_slice()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.data.as_mut_slice()
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    /// Zero-copy: consumes the tensor.
    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel(shape) != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data })
    }

    /// Largest absolute entry (0 for the impossible empty case).
    pub fn max_abs(&self) -> f32 {
        self.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape, b.shape)));
    }
    Ok(())
}

/// Matrix product `a[m,k] · b[k,n] -> [m,n]`.
///
/// Each output element is the dot product accumulated serially over `t = 0..k`
/// in ascending order; parallelism splits over output rows only.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::Shape(format!(
            "matmul expects 2-d operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_rows_into(a.data(), b.data(), out.data_mut(), k, n);
    Ok(out)
}

/// Shared kernel: `a` is `rows×k` row-major, `b` is `k×n`, `out` is `rows×n`.
fn matmul_rows_into(a: &[f32], b: &[f32], out: &mut [f32], k: usize, n: usize) {
    out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(out_row, a_row)| {
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_it * bv;
            }
        }
    });
}

/// Batched matrix product `a[g,m,k] · b[g,k,n] -> [g,m,n]`.
///
/// Slice `i` of the result equals `matmul(a[i], b[i])` bitwise: the kernel
/// and accumulation order are identical, so `g = 1` reduces exactly to
/// [`matmul`].
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[g, m, k], &[g2, k2, n]) = (&a.shape[..], &b.shape[..]) else {
        return Err(Error::Shape(format!(
            "bmm expects 3-d operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    };
    if g != g2 || k != k2 {
        return Err(Error::Shape(format!(
            "bmm operand shapes incompatible: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[g, m, n]);
    // One task per output row across all slices; row r belongs to slice r / m.
    out.data.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(r, out_row)| {
        let slice = r / m;
        let b_slice = &b.data()[slice * k * n..(slice + 1) * k * n];
        let a_row = &a.data()[r * k..(r + 1) * k];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b_slice[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_it * bv;
            }
        }
    });
    Ok(out)
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let mut out = Tensor::zeros(&a.shape);
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x + y;
    }
    Ok(out)
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let mut out = Tensor::zeros(&a.shape);
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x * y;
    }
    Ok(out)
}

/// Multiply every element by a scalar.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let mut out = Tensor::zeros(&a.shape);
    for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
        *o = x * c;
    }
    out
}

/// Softmax along the last dimension, with the usual max-subtraction for
/// stability. Each row is reduced serially in index order.
pub fn softmax_last(a: &Tensor) -> Tensor {
    let n = *a.shape.last().expect("tensor shapes are non-empty");
    let mut out = Tensor::zeros(&a.shape);
    out.data
        .as_mut_slice()
        .par_chunks_mut(n)
        .zip(a.data().par_chunks(n))
        .for_each(|(out_row, row)| softmax_row(row, out_row));
    out
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Root-mean-square normalization along the last dimension with a learned
/// per-channel gain: `out = x / sqrt(mean(x^2) + eps) * weight`.
pub fn rms_norm(a: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *a.shape.last().expect("tensor shapes are non-empty");
    if weight.shape != [d] {
        return Err(Error::Shape(format!(
            "rms_norm weight shape {:?} does not match feature dim {d}",
            weight.shape
        )));
    }
    let mut out = Tensor::zeros(&a.shape);
    let w = weight.data();
    out.data.as_mut_slice().par_chunks_mut(d).zip(a.data().par_chunks(d)).for_each(
        |(out_row, row)| {
            let mut ss = 0.0f32;
            for &v in row {
                ss += v * v;
            }
            let inv = 1.0 / (ss / d as f32 + eps).sqrt();
            for ((o, &v), &g) in out_row.iter_mut().zip(row).zip(w) {
                *o = v * inv * g;
            }
        },
    );
    Ok(out)
}

/// Sigmoid-weighted linear unit: `x * sigmoid(x)`, elementwise.
pub fn silu(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&a.shape);
    for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
        *o = x * (1.0 / (1.0 + (-x).exp()));
    }
    out
}

// ---------------------------------------------------------------------------
// In-place helpers for the model forward (exclusive mutation, no new buffer).
// ---------------------------------------------------------------------------

/// `a += b`.
pub(crate) fn add_assign(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape, b.shape);
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// `a += alpha * x`.
pub(crate) fn axpy(a: &mut Tensor, alpha: f32, x: &Tensor) {
    debug_assert_eq!(a.shape, x.shape);
    for (o, &v) in a.data_mut().iter_mut().zip(x.data()) {
        *o += alpha * v;
    }
}

/// `a = a * sigmoid(a)`, in place.
pub(crate) fn silu_inplace(a: &mut Tensor) {
    for x in a.data_mut() {
        *x *= 1.0 / (1.0 + (-*x).exp());
    }
}

/// `t += scale * z` where `z` is the next `t.len()` normal draws of `stream`,
/// applied elementwise without materializing `z`.
pub(crate) fn add_noise(t: &mut Tensor, scale: f32, stream: &mut RngStream) {
    for slot in t.data_mut() {
        *slot += scale * stream.next_normal() as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn reshape_is_zero_copy_and_validates() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data()[4], 4.0);
        assert!(r.reshape(&[7]).is_err());
    }

    #[test]
    fn matmul_small_known_answer() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
        assert!(matmul(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn bmm_single_slice_is_bitwise_matmul() {
        let mut s = RngStream::new(5);
        let a = Tensor::gaussian(&mut s, &[7, 9]);
        let b = Tensor::gaussian(&mut s, &[9, 4]);
        let flat = matmul(&a, &b).unwrap();
        let a3 = a.clone().reshape(&[1, 7, 9]).unwrap();
        let b3 = b.clone().reshape(&[1, 9, 4]).unwrap();
        let batched = bmm(&a3, &b3).unwrap();
        assert_eq!(flat.data(), batched.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = RngStream::new(8);
        let t = Tensor::gaussian(&mut s, &[5, 13]);
        let p = softmax_last(&t);
        for row in p.data().chunks(13) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn silu_matches_definition() {
        let t = Tensor::from_vec(&[3], vec![-2.0, 0.0, 1.5]).unwrap();
        let y = silu(&t);
        for (&x, &got) in t.data().iter().zip(y.data()) {
            let want = x * (1.0 / (1.0 + (-x).exp()));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn gaussian_same_seed_same_tensor() {
        let a = Tensor::gaussian(&mut RngStream::new(21), &[33, 7]);
        let b = Tensor::gaussian(&mut RngStream::new(21), &[33, 7]);
        assert_eq!(a.data(), b.data());
    }
}
