//! Binary model checkpoints.
//!
//! A checkpoint stores the full model — configuration, frozen weights
//! (dense f32 or int8-with-scales), norms, embedding, output head, and
//! adapter pairs — in a little-endian format:
//!
//! ```text
//! magic    8 bytes  "ZTUNECKP"
//! version  u32      currently 1
//! config   7 x u32  n_layers d_model n_heads d_ff vocab_size max_seq_len lora_rank
//!          f32      lora_alpha
//!          u32      number of adapter targets
//!          u8 ...   one code per target
//! count    u32      number of tensor records
//! record   u32      name length, then that many UTF-8 bytes
//!          u8       dtype: 0 = f32, 1 = int8 + per-column f32 scales
//!          u8       rank (number of dims)
//!          u32 ...  one per dim
//!          payload  f32 array, or int8 values then f32 scales
//! ```
//!
//! Loading rebuilds the model from the stored configuration and requires
//! the file's tensor set to match the model's expected set exactly — no
//! missing tensors, no extras, no shape drift. Save → load is bitwise
//! lossless for every stored tensor.

use crate::error::{Error, Result};
use crate::model::{
    place_weight, visit_float_tensors, visit_weights, LoraTarget, Model, ModelConfig, WeightMat,
};
use crate::quant::QuantTensor;
use crate::tensor::Tensor;
use crate::zo::ParamStore;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ZTUNECKP";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

/// Write a model checkpoint to `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    let c = model.config();
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len, c.lora_rank] {
        put_u32(&mut w, v as u32)?;
    }
    w.write_all(&c.lora_alpha.to_le_bytes())?;
    put_u32(&mut w, c.lora_targets.len() as u32)?;
    for t in c.targets_in_order() {
        w.write_all(&[t.code()])?;
    }

    let floats = visit_float_tensors(model);
    let weights = visit_weights(model);
    put_u32(&mut w, (floats.len() + weights.len()) as u32)?;
    for (name, t) in floats {
        put_name(&mut w, &name)?;
        w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
        for &d in t.shape() {
            put_u32(&mut w, d as u32)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for (name, weight) in weights {
        put_name(&mut w, &name)?;
        match weight {
            WeightMat::Dense(t) => {
                w.write_all(&[DTYPE_F32, 2])?;
                for &d in t.shape() {
                    put_u32(&mut w, d as u32)?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            WeightMat::Quant(q) => {
                w.write_all(&[DTYPE_I8, 2])?;
                let [k_in, k_out] = q.shape();
                put_u32(&mut w, k_in as u32)?;
                put_u32(&mut w, k_out as u32)?;
                let bytes: Vec<u8> = q.values().iter().map(|&v| v as u8).collect();
                w.write_all(&bytes)?;
                for &s in q.scales() {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a model checkpoint from `path`.
pub fn load(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("not a model checkpoint: bad leading bytes {magic:?}")));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let dims: Vec<usize> =
        (0..7).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
    let mut alpha = [0u8; 4];
    r.read_exact(&mut alpha)?;
    let n_targets = get_u32(&mut r)? as usize;
    if n_targets > LoraTarget::ALL.len() {
        return Err(Error::Data(format!("checkpoint claims {n_targets} adapter targets")));
    }
    let mut targets = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        targets.push(
            LoraTarget::from_code(code[0])
                .ok_or_else(|| Error::Data(format!("unknown adapter target code {}", code[0])))?,
        );
    }
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        vocab_size: dims[4],
        max_seq_len: dims[5],
        lora_rank: dims[6],
        lora_alpha: f32::from_le_bytes(alpha),
        lora_targets: targets,
    };
    config.validate()?;

    // Build the skeleton, then overwrite every tensor from the file.
    let mut model = Model::init(&config, 0)?;
    let mut expected: BTreeSet<String> = visit_float_tensors(&model)
        .into_iter()
        .map(|(n, _)| n)
        .chain(visit_weights(&model).into_iter().map(|(n, _)| n))
        .collect();

    let count = get_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {count} tensors, model needs {}",
            expected.len()
        )));
    }
    for _ in 0..count {
        let name = get_name(&mut r)?;
        if !expected.remove(&name) {
            return Err(Error::Data(format!(
                "checkpoint tensor '{name}' is unknown or appears twice"
            )));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let (dtype, rank) = (head[0], head[1] as usize);
        if rank == 0 || rank > 3 {
            return Err(Error::Data(format!("tensor '{name}' has impossible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total = 1usize;
        for _ in 0..rank {
            let d = get_u32(&mut r)? as usize;
            total = total
                .checked_mul(d)
                .filter(|&t| t <= (1 << 30))
                .ok_or_else(|| Error::Data(format!("tensor '{name}' dimensions overflow")))?;
            shape.push(d);
        }
        match dtype {
            DTYPE_F32 => {
                let mut buf = vec![0u8; total * 4];
                r.read_exact(&mut buf)?;
                let data: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                if is_weight_name(&name) {
                    place_weight(
                        &mut model,
                        &name,
                        WeightMat::Dense(Tensor::from_vec(&shape, data)?),
                    )?;
                } else {
                    let slot = model.param_mut(&name).ok_or_else(|| {
                        Error::Data(format!("tensor '{name}' does not exist in this model"))
                    })?;
                    if slot.shape() != shape.as_slice() {
                        return Err(Error::Data(format!(
                            "tensor '{name}' has shape {shape:?}, model expects {:?}",
                            slot.shape()
                        )));
                    }
                    slot.data_mut().copy_from_slice(&data);
                }
            }
            DTYPE_I8 => {
                if rank != 2 {
                    return Err(Error::Data(format!("int8 tensor '{name}' must be 2-d")));
                }
                let mut vals = vec![0u8; total];
                r.read_exact(&mut vals)?;
                let values: Vec<i8> = vals.into_iter().map(|b| b as i8).collect();
                let mut sbuf = vec![0u8; shape[1] * 4];
                r.read_exact(&mut sbuf)?;
                let scales: Vec<f32> = sbuf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let q = QuantTensor::from_parts(shape[0], shape[1], values, scales)?;
                place_weight(&mut model, &name, WeightMat::Quant(q))?;
            }
            other => return Err(Error::Data(format!("tensor '{name}' has unknown dtype {other}"))),
        }
    }
    if !expected.is_empty() {
        return Err(Error::Data(format!("checkpoint is missing tensors: {expected:?}")));
    }
    Ok(model)
}

/// Projection weights route through `place_weight` (they may be quantized);
/// everything else is a plain float parameter.
fn is_weight_name(name: &str) -> bool {
    name == "lm_head.weight"
        || (name.starts_with("blocks.")
            && name.ends_with(".weight")
            && (name.contains(".attn.w") || name.contains(".mlp.up") || name.contains(".mlp.down")))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn put_name(w: &mut impl Write, name: &str) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn get_name(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len == 0 || len > 4096 {
        return Err(Error::Data(format!("tensor name length {len} is out of range")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Data("tensor name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Batch, LoraTarget};
    use crate::rng::RngStream;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 16,
            max_seq_len: 32,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::MlpDown],
        }
    }

    fn batch() -> Batch {
        Batch::new(&[vec![1, 2, 3, 4], vec![5, 6, 7]], &[3, 9], None).unwrap()
    }

    #[test]
    fn dense_roundtrip_is_bitwise_lossless() {
        let mut m = Model::init(&cfg(), 42).unwrap();
        // Move the trainable halves off zero so the roundtrip is non-trivial.
        let mut stream = RngStream::new(5);
        for name in m.lora_b_names() {
            let t = m.param_mut(&name).unwrap();
            stream.fill_normal(t.data_mut());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&m, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        for (name, t) in visit_float_tensors(&m) {
            assert_eq!(t.data(), loaded.param(&name).unwrap().data(), "{name}");
        }
        let (a, b) =
            (m.forward_loss(&batch(), None).unwrap(), loaded.forward_loss(&batch(), None).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn quantized_roundtrip_preserves_values_and_scales() {
        let mut m = Model::init(&cfg(), 43).unwrap();
        m.quantize_weights().unwrap();
        let n_quant = m.quantized_matrix_count();
        assert_eq!(n_quant, 2 * 6 + 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.q.ckpt");
        save(&m, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.quantized_matrix_count(), n_quant);
        let (a, b) =
            (m.forward_loss(&batch(), None).unwrap(), loaded.forward_loss(&batch(), None).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTACKPT????????").unwrap();
        assert!(matches!(load(&bad), Err(Error::Data(_))));

        let m = Model::init(&cfg(), 44).unwrap();
        let good = dir.path().join("good.ckpt");
        save(&m, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&cut), Err(Error::Io(_))));
    }
}
