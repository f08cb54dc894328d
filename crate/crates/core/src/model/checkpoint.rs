//! Binary checkpoint format, all little-endian:
//!
//! ```text
//! magic     8 bytes  "IDACKPT\0"
//! version   u32
//! config    u32 height, width, ensemble_size, orientation_count,
//!           channels[3], kernels[3]; f64 learning_rate
//! count     u32 number of tensors
//! shapes    per tensor: u32 ndim, then ndim x u32
//! data      per tensor: f64 values in row-major order
//! ```
//!
//! Optimizer moments are not stored; a loaded model starts a fresh Adam state.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{EnsembleModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"IDACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &EnsembleModel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let c = model.config();
    let header = [
        c.height,
        c.width,
        c.ensemble_size,
        c.orientation_count,
        c.channels[0],
        c.channels[1],
        c.channels[2],
        c.kernels[0],
        c.kernels[1],
        c.kernels[2],
    ];
    for v in header {
        out.write_all(&to_u32(v)?.to_le_bytes())?;
    }
    out.write_all(&c.learning_rate.to_le_bytes())?;
    out.write_all(&to_u32(model.params().len())?.to_le_bytes())?;
    for p in model.params().iter() {
        let shape = p.value.shape();
        out.write_all(&to_u32(shape.len())?.to_le_bytes())?;
        for &d in shape {
            out.write_all(&to_u32(d)?.to_le_bytes())?;
        }
    }
    for p in model.params().iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EnsembleModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut h = [0usize; 10];
    for v in &mut h {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        height: h[0],
        width: h[1],
        ensemble_size: h[2],
        orientation_count: h[3],
        channels: [h[4], h[5], h[6]],
        kernels: [h[7], h[8], h[9]],
        learning_rate: r.f64()?,
    };
    config.validate()?;
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    EnsembleModel::from_parts(config, tensors)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
