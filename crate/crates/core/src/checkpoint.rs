//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DSYNCKPT"
//! version    u32      1
//! meta_count u32
//! meta_count × { key: str, value: str }
//! entry_count u32
//! entry_count × {
//!     name   str
//!     dtype  u8       1 = f32, 2 = f64
//!     rank   u8
//!     dims   rank × u64
//!     data   product(dims) values, row-major
//! }
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DSYNCKPT";
pub const VERSION: u32 = 1;

/// Parameters plus string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<F>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn new(params: ParamStore<F>) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.push(F::DTYPE.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a container whose entries all have this precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            if dtype != F::DTYPE {
                return Err(Error::Format(format!(
                    "entry {name} has dtype {dtype:?}, expected {:?}",
                    F::DTYPE
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| Error::Format(format!("entry {name} is too large")))?;
            let size = dtype.size();
            let payload = r.take(
                count
                    .checked_mul(size)
                    .ok_or_else(|| Error::Format("entry too large".into()))?,
            )?;
            let data = payload.chunks(size).map(F::read_le).collect();
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata {key:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn store<F: Real>() -> ParamStore<F> {
        let mut r = rng::stream(1, "ckpt-test", 0);
        let mut p = ParamStore::new();
        p.insert("b.w", Tensor::randn(&[3, 4], 1.0, &mut r));
        p.insert("a", Tensor::randn(&[5], 1.0, &mut r));
        p.insert("c.deep", Tensor::randn(&[2, 1, 3], 1e-30, &mut r));
        p
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = Checkpoint::new(store::<f32>())
            .with_meta("kind", "test")
            .with_meta("steps", 3);
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.names(), vec!["b.w", "a", "c.deep"]);
        let d = Checkpoint::new(store::<f64>());
        assert_eq!(Checkpoint::<f64>::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(store::<f32>()).to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
    }
}
