//! Weight-only int8 quantization with per-output-channel scales.
//!
//! Frozen weight matrices can be stored as `int8` with one `f32` scale per
//! output channel. Before a matrix is used it is dequantized into a
//! transient `f32` tensor that is freed right after the product — weights
//! stay compressed at rest, and the float copy exists only inside a single
//! forward pass.
//!
//! Because dequantization costs real time, the module counts every
//! materialization. A training step that runs its two perturbed evaluations
//! in one combined forward dequantizes each weight exactly once; a step that
//! runs them as two sequential passes pays twice. The counters make that
//! difference observable in benchmarks and enforceable in tests.

use crate::alloc::TrackedVec;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};

/// Process-global count of dequantizations (transient float materializations).
static DEQUANT_TOTAL: AtomicU64 = AtomicU64::new(0);

/// Total number of dequantizations performed by the process so far.
pub fn dequant_total() -> u64 {
    DEQUANT_TOTAL.load(Ordering::SeqCst)
}

/// An int8 matrix `[k_in, k_out]` with one scale per output channel.
#[derive(Debug)]
pub struct QuantTensor {
    k_in: usize,
    k_out: usize,
    values: TrackedVec<i8>,
    scales: TrackedVec<f32>,
    dequant_count: AtomicU64,
}

impl Clone for QuantTensor {
    fn clone(&self) -> Self {
        QuantTensor {
            k_in: self.k_in,
            k_out: self.k_out,
            values: self.values.clone(),
            scales: self.scales.clone(),
            dequant_count: AtomicU64::new(0),
        }
    }
}

impl QuantTensor {
    pub fn shape(&self) -> [usize; 2] {
        [self.k_in, self.k_out]
    }

    pub fn values(&self) -> &[i8] {
        self.values.as_slice()
    }

    pub fn scales(&self) -> &[f32] {
        self.scales.as_slice()
    }

    /// How many times this tensor has been dequantized.
    pub fn dequant_count(&self) -> u64 {
        self.dequant_count.load(Ordering::SeqCst)
    }

    /// Rebuild from raw parts (checkpoint loading).
    pub fn from_parts(
        k_in: usize,
        k_out: usize,
        values: Vec<i8>,
        scales: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != k_in * k_out || scales.len() != k_out {
            return Err(Error::Data(format!(
                "quantized tensor parts do not match shape [{k_in}, {k_out}]"
            )));
        }
        Ok(QuantTensor {
            k_in,
            k_out,
            values: TrackedVec::from_vec(values),
            scales: TrackedVec::from_vec(scales),
            dequant_count: AtomicU64::new(0),
        })
    }
}

/// Quantize a 2-d weight matrix symmetrically, one scale per output channel
/// (column): `scale_j = max_i |w[i,j]| / 127`, values rounded to nearest.
///
/// An all-zero column gets scale 1.0 so dequantization stays well-defined.
pub fn quantize(w: &Tensor) -> Result<QuantTensor> {
    let &[k_in, k_out] = w.shape() else {
        return Err(Error::Shape(format!("quantize expects a 2-d weight, got {:?}", w.shape())));
    };
    let data = w.data();
    let mut scales = vec![0.0f32; k_out];
    for j in 0..k_out {
        let mut m = 0.0f32;
        for i in 0..k_in {
            m = m.max(data[i * k_out + j].abs());
        }
        scales[j] = if m == 0.0 { 1.0 } else { m / 127.0 };
    }
    let mut values = vec![0i8; k_in * k_out];
    for i in 0..k_in {
        for j in 0..k_out {
            let q = (data[i * k_out + j] / scales[j]).round();
            values[i * k_out + j] = q.clamp(-127.0, 127.0) as i8;
        }
    }
    Ok(QuantTensor {
        k_in,
        k_out,
        values: TrackedVec::from_vec(values),
        scales: TrackedVec::from_vec(scales),
        dequant_count: AtomicU64::new(0),
    })
}

/// Materialize the float matrix `values[i,j] * scale[j]`, incrementing both
/// the per-tensor and the process-global dequantization counters.
pub fn dequantize(q: &QuantTensor) -> Tensor {
    q.dequant_count.fetch_add(1, Ordering::SeqCst);
    DEQUANT_TOTAL.fetch_add(1, Ordering::SeqCst);
    let mut out = Tensor::zeros(&[q.k_in, q.k_out]);
    let scales = q.scales.as_slice();
    let vals = q.values.as_slice();
    for (row_out, row_q) in out.data_mut().chunks_mut(q.k_out).zip(vals.chunks(q.k_out)) {
        for ((o, &v), &s) in row_out.iter_mut().zip(row_q).zip(scales) {
            *o = v as f32 * s;
        }
    }
    out
}

/// `x · dequantize(q)`: materializes the float weight, multiplies, and frees
/// the transient copy before returning. Bitwise identical to calling
/// [`matmul`] on the dequantized matrix.
pub fn dequant_matmul(x: &Tensor, q: &QuantTensor) -> Result<Tensor> {
    let w = dequantize(q);
    matmul(x, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn roundtrip_error_bounded_by_half_scale() {
        let w = Tensor::gaussian(&mut RngStream::new(4), &[32, 17]);
        let q = quantize(&w).unwrap();
        let back = dequantize(&q);
        for j in 0..17 {
            let s = q.scales()[j];
            for i in 0..32 {
                let err = (w.data()[i * 17 + j] - back.data()[i * 17 + j]).abs();
                assert!(err <= s * 0.5 + 1e-7, "({i},{j}): err {err} vs scale {s}");
            }
        }
    }

    #[test]
    fn scales_are_max_abs_over_127() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.0, -4.0, 0.5, 0.0]).unwrap();
        let q = quantize(&w).unwrap();
        assert_eq!(q.scales()[0], 4.0 / 127.0);
        assert_eq!(q.scales()[1], 2.0 / 127.0);
        // All-zero channel falls back to scale 1.
        assert_eq!(q.scales()[2], 1.0);
        // Extremes hit exactly ±127.
        assert_eq!(q.values()[3 * 1 + 0], -127);
    }

    #[test]
    fn dequant_matmul_matches_explicit_dequantize() {
        let mut s = RngStream::new(9);
        let w = Tensor::gaussian(&mut s, &[16, 8]);
        let x = Tensor::gaussian(&mut s, &[5, 16]);
        let q = quantize(&w).unwrap();
        let a = dequant_matmul(&x, &q).unwrap();
        let b = matmul(&x, &dequantize(&q)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn counters_increment_per_materialization() {
        let w = Tensor::gaussian(&mut RngStream::new(2), &[4, 4]);
        let q = quantize(&w).unwrap();
        let global_before = dequant_total();
        assert_eq!(q.dequant_count(), 0);
        let _ = dequantize(&q);
        let x = Tensor::gaussian(&mut RngStream::new(3), &[2, 4]);
        let _ = dequant_matmul(&x, &q).unwrap();
        assert_eq!(q.dequant_count(), 2);
        assert_eq!(dequant_total() - global_before, 2);
    }
}
