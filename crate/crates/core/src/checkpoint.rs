//! USEGCKPT weight files.
//!
//! ```text
//! "USEGCKPT"              8 bytes
//! version                 u32 LE = 1
//! repeated until EOF:
//!   name length           u32 LE
//!   name                  UTF-8
//!   ndims                 u32 LE
//!   dims                  ndims x u32 LE
//!   values                prod(dims) x f64 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"USEGCKPT";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * params.scalar_count() + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos;
        match start.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                self.pos = end;
                Ok(&self.bytes[start..end])
            }
            _ => Err(self.err(
                start,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - start),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], context: &str) -> Result<ParameterSet> {
    let mut c = Cursor { bytes, pos: 0, context };
    if c.take(8, "magic")? != MAGIC {
        return Err(c.err(0, "bad magic, not a USEGCKPT file"));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(c.err(8, format!("unsupported version {version}")));
    }
    let mut params = ParameterSet::new();
    while c.pos < bytes.len() {
        let record = c.pos;
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| c.err(record + 4, "parameter name is not UTF-8"))?
            .to_string();
        let ndims = c.u32("dim count")?;
        let mut shape = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            shape.push(c.u32("dims")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| c.err(record, format!("`{name}` has an overflowing shape {shape:?}")))?;
        let values = c
            .take(count, "values")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params
            .insert(name, Tensor::new(shape, values)?)
            .map_err(|e| c.err(record, e.to_string()))?;
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
