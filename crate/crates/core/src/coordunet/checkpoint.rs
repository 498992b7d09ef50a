//! Parameter checkpoints.
//!
//! Layout, all little-endian: magic `CTNP`, `u32` version, `u64` length of
//! the network config JSON and its bytes, `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64` extents
//! and the `f64` values.

use std::path::Path;

use super::net::{Tensor, UNet};
use super::NetworkConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTNP";
const VERSION: u32 = 1;

pub fn encode_checkpoint(net: &UNet) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(net.config())?;
    let mut out = Vec::with_capacity(64 + cfg.len() + net.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for t in net.params() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.malformed("length overflows"))
    }

    fn malformed(&self, reason: &str) -> Error {
        Error::MalformedHeader {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.malformed(&format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let cfg: NetworkConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.malformed("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.malformed("tensor size overflows"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| r.malformed("tensor size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.malformed("trailing bytes after tensor table"));
    }
    let mut net = UNet::zeros(cfg)?;
    net.load_params(params)?;
    Ok(net)
}

pub fn save_checkpoint(net: &UNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
