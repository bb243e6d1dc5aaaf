//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RSPC" | version u32 | count u32 |
//!   count x ( name_len u32 | name utf-8 | rank u32 | extents u64 x rank | f64 x prod(extents) )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSPC";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
    for (name, t) in params.iter() {
        if name.is_empty() {
            return Err(Error::InvalidArgument("parameter name must be non-empty".into()));
        }
        out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rank())?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("version mismatch: file has {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let payload = r.take(len, &format!("tensor {name}"))?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::new(vec![2, 1, 1, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap())
            .unwrap();
        p.insert("a.bias", Tensor::new(vec![2], vec![0.1, -7.0]).unwrap()).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let q = decode(&encode(&p).unwrap()).unwrap();
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ParamSet::new()).unwrap();
        assert_eq!(bytes, b"RSPC\x01\x00\x00\x00\x00\x00\x00\x00");
    }

    #[test]
    fn bad_magic_and_version() {
        let err = decode(b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let err = decode(b"RSPC\x02\x00\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated") || err.to_string().contains("magic"), "{err}");
        }
    }
}
