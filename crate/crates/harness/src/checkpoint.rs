//! Minimal binary checkpoint of named f64 tensors.
//!
//! Layout, all integers little-endian:
//! `b"ANFRCKPT"`, `u32` version, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and the
//! `f64` payload in row-major order.

use crate::error::{HarnessError, Result};
use anfr_core::nn::NamedParams;
use anfr_core::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ANFRCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &NamedParams) -> Vec<u8> {
    let payload: usize = params.values().map(|t| 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + payload + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            HarnessError::Checkpoint(format!(
                "truncated at byte {} while reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(HarnessError::Checkpoint("bad magic header".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut params = NamedParams::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| HarnessError::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 4 {
            return Err(HarnessError::Checkpoint(format!("`{name}`: rank {rank} > 4")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| HarnessError::Checkpoint(format!("`{name}`: dims {dims:?} overflow")))?;
        let data: Vec<f64> = r
            .take(numel, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::from_vec(&dims, data).map_err(|e| HarnessError::Checkpoint(format!("`{name}`: {e}")))?
        };
        if params.insert(name.clone(), t).is_some() {
            return Err(HarnessError::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(HarnessError::Checkpoint(format!(
            "{} trailing bytes after {count} records",
            buf.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &NamedParams) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedParams> {
    let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&buf)
}
