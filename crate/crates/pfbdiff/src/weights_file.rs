//! Flat little-endian weights container.
//!
//! ```text
//! "PFBW"  u32 version (= 1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//!             product(dims) × f32 data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use pfbdiff_core::denoiser::{UNetConfig, Weights};
use pfbdiff_core::Tensor;

pub const MAGIC: &[u8; 4] = b"PFBW";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightsFileError {
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights file version {0}")]
    UnsupportedVersion(u32),
    #[error("weights file truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] pfbdiff_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WeightsFileError>;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.shape().len()).map_err(|_| too_big("tensor rank"))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("tensor dimension"))?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> WeightsFileError {
    WeightsFileError::Malformed(format!("{what} does not fit the format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(WeightsFileError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| WeightsFileError::BadMagic)? != MAGIC {
        return Err(WeightsFileError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsFileError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightsFileError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = usize::from(r.u8()?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightsFileError::Malformed(format!("tensor `{name}` is too large")))?;
        let data = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(&shape, data)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(WeightsFileError::Malformed(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(WeightsFileError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn read_weights(path: &Path, cfg: &UNetConfig) -> Result<Weights> {
    Ok(Weights::from_tensors(cfg, decode(&std::fs::read(path)?)?)?)
}

pub fn write_weights(path: &Path, w: &Weights) -> Result<()> {
    Ok(std::fs::write(path, encode(w.iter())?)?)
}
