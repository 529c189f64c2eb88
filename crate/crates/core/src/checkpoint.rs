//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DSTYCKPT"
//! version   u8       currently 1
//! n_meta    u32      then n_meta x { u32 key_len, key, u32 value_len, value }  (UTF-8)
//! n_tensor  u32      then n_tensor x { u32 name_len, name, u8 rank, rank x u64 dim, f64 data }
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Entries are written in sorted key order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSTYCKPT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) {
        self.tensors.insert(name.to_string(), t.clone());
    }

    pub fn insert_module<M: Module + ?Sized>(&mut self, prefix: &str, m: &M) {
        m.visit(prefix, &mut |name, t| {
            self.tensors.insert(name, t.clone());
        });
    }

    /// Overwrites every parameter of `m` from the entries under `prefix`;
    /// names and shapes must match exactly.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, m: &mut M) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(Error::Format(format!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks tensor {name:?}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes[8] != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[8])));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint digest mismatch (corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 9 };
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(ck)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "test");
        ck.set_meta("note", "héllo");
        ck.insert("a.weight", &Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        ck.insert("b", &Tensor::new(&[1], vec![f64::MIN_POSITIVE]).unwrap());
        ck.insert("scalar", &Tensor::scalar(-0.0));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (k, t) in &ck.tensors {
            assert!(back.tensors[k].bit_eq(t));
        }
        assert_eq!(back.meta, ck.meta);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut v2 = sample().to_bytes();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
