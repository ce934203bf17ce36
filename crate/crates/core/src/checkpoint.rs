//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `HMCK`, version byte, three zero bytes,
//! `u32` entry count, then per entry: `u32` path length, UTF-8 path,
//! `u32` rank, `u32` dims, `f64` values. Entries are in path order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HMCK";
pub const VERSION: u8 = 1;

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, 0, 0, 0]);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParams> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.take(4)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()?;
    let mut params = NetworkParams::new();
    for _ in 0..count {
        let len = c.u32()?;
        let path = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{path}`: {e}")))?;
        params.insert(path, t.with_grad());
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(params)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ModelConfig::miniature().init_params(5);
        params.get_mut("kp2d.bias").unwrap().data_mut()[0] = -0.0;
        params.get_mut("kp2d.bias").unwrap().data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let bytes = encode(&params);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for ((pa, a), (pb, b)) in params.iter().zip(back.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&ModelConfig::miniature().init_params(1));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
