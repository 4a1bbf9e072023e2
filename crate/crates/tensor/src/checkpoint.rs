//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SFADCKPT"
//! version  u32      1
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), dtype u8 (1 = f32, 2 = f64),
//!          rank u32, dims u64 × rank, values (dtype width × numel)
//! ```

use std::fs;
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SFADCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, converting stored values to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Format("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| TensorError::Format(format!("parameter name: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| TensorError::Format(format!("unknown dtype tag {tag} for `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data = raw
            .chunks_exact(dtype.size())
            .map(|c| match dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save<T: Element>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}
