//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MGANCKPT"
//! version      u32       currently 1
//! n_meta       u32
//! n_meta × { key_len u32, key utf-8, val_len u32, val utf-8 }
//! n_tensors    u32
//! n_tensors × { name_len u32, name utf-8, rank u32, rank × dim u64,
//!               numel × f64 (IEEE-754 bits, little-endian) }
//! ```
//!
//! Tensors are written in name order, so equal contents produce identical
//! bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every parameter under `prefix`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            let t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
            self.tensors.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Collects the tensors stored under `prefix` as trainable parameters.
    pub fn take_params(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            ck.tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_is_exact() {
        let mut ck = Checkpoint::new();
        ck.meta.insert("epoch".into(), "3".into());
        ck.tensors.insert(
            "w".into(),
            Tensor::new(vec![2, 3], vec![0.1, -1e-300, f64::MAX, 1.0 / 3.0, -0.0, 7.0]).unwrap(),
        );
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.tensors["w"].data().iter().zip(ck.tensors["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.tensors.insert("b".into(), Tensor::zeros(&[4]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
