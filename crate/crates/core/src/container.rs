//! Versioned binary artifact container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CPCV"            magic
//! u32               format version
//! u32               artifact kind
//! u64               experiment seed
//! u32               array count
//!   u32 name_len, name bytes (utf-8)
//!   u32 ndim, u64 x ndim dims
//!   f64 x prod(dims) values
//! u32               record count
//!   u32 len, len bytes
//! ```
//!
//! Records carry structured metadata (segment tables, ledger entries) as
//! JSON documents.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPCV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ArtifactKind {
    Tokenizer = 1,
    Model = 2,
    Ledger = 3,
    Adapter = 4,
}

impl ArtifactKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            1 => Self::Tokenizer,
            2 => Self::Model,
            3 => Self::Ledger,
            4 => Self::Adapter,
            other => return Err(Error::Artifact(format!("unknown artifact kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ArtifactKind,
    pub seed: u64,
    pub arrays: Vec<(String, Tensor)>,
    pub records: Vec<Vec<u8>>,
}

impl Container {
    pub fn new(kind: ArtifactKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            arrays: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn push_record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.records.push(serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Artifact(format!("missing array `{name}`")))
    }

    pub fn decode_records<T: DeserializeOwned>(&self) -> Result<Vec<T>> {
        self.records
            .iter()
            .map(|r| serde_json::from_slice(r).map_err(|e| Error::Artifact(format!("bad record: {e}"))))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Artifact("bad magic, not a CPCV container".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let kind = ArtifactKind::from_u32(r.u32()?)?;
        let seed = r.u64()?;
        let n_arrays = r.u32()?;
        let mut arrays = Vec::with_capacity(n_arrays as usize);
        for _ in 0..n_arrays {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Artifact("array name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let n_records = r.u32()?;
        let mut records = Vec::with_capacity(n_records as usize);
        for _ in 0..n_records {
            let len = r.u32()? as usize;
            records.push(r.take(len)?.to_vec());
        }
        if r.pos != bytes.len() {
            return Err(Error::Artifact(format!(
                "{} trailing bytes after container",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            seed,
            arrays,
            records,
        })
    }

    /// Writes the container and returns the SHA-256 of the bytes written.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path, expected: ArtifactKind) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
        let c = Self::from_bytes(&bytes)?;
        if c.kind != expected {
            return Err(Error::Artifact(format!(
                "{} holds a {:?} artifact, expected {expected:?}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
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
            .ok_or_else(|| Error::Artifact("truncated container".into()))?;
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
}
