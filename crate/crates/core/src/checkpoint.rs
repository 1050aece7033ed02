//! Versioned single-file checkpoint blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "IDPK"
//! version   u32
//! kind_len  u16, kind (utf-8)
//! meta_len  u32, meta (JSON object; geometry and other scalar fields)
//! count     u32
//! count x { name_len u16, name, rank u8, dims u64 * rank }
//! payload   f32 * sum(prod(dims)), tensors in name order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"IDPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new<M: Serialize>(kind: &str, meta: &M, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            meta: serde_json::to_value(meta)?,
            tensors: params.export()?,
        })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{} header: {e}", self.kind)))
    }

    pub fn params(&self) -> Result<ParamSet> {
        ParamSet::import(self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let kind = self.kind.as_bytes();
        out.extend_from_slice(&(kind.len() as u16).to_le_bytes());
        out.extend_from_slice(kind);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut tensors = self.tensors.clone();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, _) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for (_, _, data) in &tensors {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let kind_len = r.u16()? as usize;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("kind is not utf-8".into()))?;
        let meta_len = r.u32()? as usize;
        let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            index.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dims) in index {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, dims, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads and checks the kind tag.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck = Self::load(path.as_ref())?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.as_ref().display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}
