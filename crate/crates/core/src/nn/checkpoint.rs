//! Versioned model checkpoints.
//!
//! ```text
//! "CMOM" | version u32 | arch kind u32 | n u32 | n x size u32
//!        | W H Ch C u32 | param count u64 | params f64 LE
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, Model};
use crate::corpus::ImageShape;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMOM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (kind, sizes): (usize, &[usize]) = match model.architecture() {
        Architecture::Linear => (0, &[]),
        Architecture::Mlp { hidden } => (1, hidden),
        Architecture::TinyConv { channels } => (2, channels),
    };
    put_u32(&mut out, kind)?;
    put_u32(&mut out, sizes.len())?;
    for &s in sizes {
        put_u32(&mut out, s)?;
    }
    let input = model.input_shape();
    for v in [input.width, input.height, input.channels, model.num_classes()] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let kind = r.u32()?;
    let n = r.u32()?;
    if n > 1024 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let sizes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = match (kind, sizes.is_empty()) {
        (0, true) => Architecture::Linear,
        (1, _) => Architecture::Mlp { hidden: sizes },
        (2, _) => Architecture::TinyConv { channels: sizes },
        _ => return Err(Error::Format(format!("unknown architecture kind {kind}"))),
    };
    let input = ImageShape::new(r.u32()?, r.u32()?, r.u32()?).map_err(|e| Error::Format(e.to_string()))?;
    let classes = r.u32()?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("parameter count overflows".into()))?)?;
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.at
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Model::from_params(arch, input, classes, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
