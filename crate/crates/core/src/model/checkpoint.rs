//! Binary checkpoint format.
//!
//! ```text
//! magic "RDPOCKPT" | u32 version | u32 config_len | config JSON
//! u32 tensor_count | per tensor: u32 name_len | name | u32 ndim | u64 dims.. | f64 data..
//! ```
//! All integers and floats little-endian; floats stored by bit pattern.

use std::io::{Read, Write};

use crate::autodiff::Tensor;

use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"RDPOCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, mut w: impl Write) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let layout = model.config.param_layout();
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for ((name, _), t) in layout.iter().zip(&model.params) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(mut r: impl Read) -> Result<Model, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    config.validate()?;
    let layout = config.param_layout();
    let count = read_u32(&mut r)? as usize;
    if count != layout.len() {
        return Err(bad("tensor count does not match config"));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in layout {
        let nlen = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        if nb != name.as_bytes() {
            return Err(ModelError::Checkpoint(format!("expected tensor {name}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
        }
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params.push(Tensor::new(dims, data)?);
    }
    Ok(Model { config, params })
}
