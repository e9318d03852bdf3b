//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! u8      version (= 1)
//! u32     header length H
//! H bytes UTF-8 header (free-form key=value lines)
//! u64     optimizer step
//! u32     parameter count P
//! P times, in name order:
//!   u32      name length N, then N bytes UTF-8 name
//!   u32      rank R, then R × u64 dimensions
//!   n × f64  values       (n = product of dimensions)
//!   n × f64  Adam first moment
//!   n × f64  Adam second moment
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Parameter, ParameterStore};

pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_checkpoint(header: &str, store: &ParameterStore) -> Vec<u8> {
    let mut out = vec![CHECKPOINT_VERSION];
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in [&p.value, &p.m, &p.v] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParameterStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = r.string(header_len)?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| {
            Error::Checkpoint(format!("shape of '{name}' overflows"))
        })?;
        let value = Tensor::new(shape.clone(), r.f64s(n)?)?;
        let m = Tensor::new(shape.clone(), r.f64s(n)?)?;
        let v = Tensor::new(shape, r.f64s(n)?)?;
        store.insert_parameter(name, Parameter { value, m, v })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    store.set_step(step);
    Ok((header, store))
}

pub fn write_checkpoint(path: &Path, header: &str, store: &ParameterStore) -> Result<()> {
    fs::write(path, encode_checkpoint(header, store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, ParameterStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
