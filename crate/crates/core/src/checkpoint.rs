//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FLGN"                magic
//! u32                   format version
//! u64                   tensor count
//! per tensor:
//!   u32 + bytes         UTF-8 name
//!   u32                 rank
//!   u64 × rank          dims
//!   f64 × prod(dims)    data, row-major
//! u64 + bytes           metadata, UTF-8 JSON
//! ```

use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor dimensions overflow: {0:?}")]
    DimensionOverflow(Vec<u64>),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("metadata is not valid JSON: {0}")]
    BadMetadata(String),
    #[error("{0} trailing bytes after metadata")]
    TrailingBytes(usize),
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Named tensors plus a JSON metadata object.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, metadata: Value) -> Self {
        Self { tensors, metadata }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u64("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(64));
            for _ in 0..rank {
                dims.push(r.u64("dims")?);
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .and_then(|b| usize::try_from(b).ok())
                .ok_or_else(|| CheckpointError::DimensionOverflow(dims.clone()))?
                / 8;
            let raw = r.take(numel * 8, "data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let tensor = Tensor::new(shape, data).map_err(|_| CheckpointError::DimensionOverflow(dims))?;
            tensors.push((name, tensor));
        }
        let meta_len = usize::try_from(r.u64("metadata length")?).map_err(|_| CheckpointError::Truncated("metadata"))?;
        let meta = r.take(meta_len, "metadata")?;
        let metadata = serde_json::from_slice(meta).map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)], metadata: &Value) -> Result<(), CheckpointError> {
    Checkpoint::new(tensors.to_vec(), metadata.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Vec<(String, Tensor)>, Value), CheckpointError> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.tensors, ck.metadata))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
