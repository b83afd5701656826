//! USEG1 single-sample file format.
//!
//! ```text
//! offset  size          field
//! 0       6             magic "USEG1\0"
//! 6       2             version (u16 LE) = 1
//! 8       1             domain (0 = MRI, 1 = CT)
//! 9       2             channels (u16 LE)
//! 11      2             height (u16 LE)
//! 13      2             width (u16 LE)
//! 15      4*C*H*W       image, f32 LE, channel-major
//! ...     H*W           mask, u8 (0 or 1)
//! ```
//!
//! The sample id is not stored; readers take it from the file stem.

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"USEG1\0";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 15;

fn u16_field(name: &'static str, value: usize) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::invalid(name, format!("{value} exceeds u16")))
}

pub fn encode_sample(sample: &Sample) -> Result<Vec<u8>> {
    sample.validate()?;
    let [c, h, w] = *sample.image.shape() else {
        unreachable!("validated")
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * c * h * w + h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(sample.domain.code());
    out.extend_from_slice(&u16_field("channels", c)?.to_le_bytes());
    out.extend_from_slice(&u16_field("height", h)?.to_le_bytes());
    out.extend_from_slice(&u16_field("width", w)?.to_le_bytes());
    for &v in sample.image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(sample.mask.data().iter().map(|&m| m as u8));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                self.err(
                    self.bytes.len(),
                    format!("truncated: {what} needs {n} bytes at offset {}", self.pos),
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_sample(bytes: &[u8], id: &str) -> Result<Sample> {
    let mut r = Reader {
        bytes,
        pos: 0,
        context: id,
    };
    if r.take(6, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic, not a USEG1 file"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.err(6, format!("unsupported version {version}")));
    }
    let code = r.take(1, "domain")?[0];
    let domain = Domain::from_code(code).map_err(|_| r.err(8, format!("unknown domain code {code}")))?;
    let c = r.u16("channels")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let image_start = r.pos;
    let raw = r.take(4 * c * h * w, "image payload")?;
    let image: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mask_start = r.pos;
    let mask: Vec<f64> = r.take(h * w, "mask payload")?.iter().map(|&b| b as f64).collect();
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(i) = image.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(r.err(image_start + 4 * i, "image value outside [0, 1]"));
    }
    if let Some(i) = mask.iter().position(|&m| m > 1.0) {
        return Err(r.err(mask_start + i, "mask value is not 0 or 1"));
    }
    Sample::new(
        id,
        domain,
        Tensor::new([c, h, w], image)?,
        Tensor::new([1, h, w], mask)?,
    )
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    std::fs::write(path, encode_sample(sample)?).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_sample(&bytes, &id)
}
