//! Flat binary parameter checkpoints.
//!
//! Layout: the 4-byte magic `SKPT`, one format-version byte, then one record
//! per parameter until end of file:
//!
//! | field       | encoding                          |
//! |-------------|-----------------------------------|
//! | name length | u32 little-endian                 |
//! | name        | UTF-8 bytes                       |
//! | rank        | u32 little-endian                 |
//! | extents     | `rank` × u64 little-endian        |
//! | values      | `prod(extents)` × f64 little-endian |

use std::fs;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SKPT";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + store.num_scalars() * 8);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail("extent overflow"))?;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| r.fail("extent overflow"))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::from_f64c(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: start as u64,
            reason: e.to_string(),
        })?;
        store.add(name, tensor).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: start as u64,
            reason: e.to_string(),
        })?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("backbone.w", Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap())
            .unwrap();
        s.add("head.b", Tensor::from_f64(&[1], &[0.125]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"SKPT");
        assert_eq!(bytes[4], VERSION);
        let back: ParamStore<f64> = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let abits: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        match decode::<f64>(cut, Path::new("x.ckpt")) {
            Err(Error::Format { offset, reason, .. }) => {
                assert!(reason.contains("values"));
                assert!(offset > 5);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            decode::<f64>(&bytes, Path::new("x")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
