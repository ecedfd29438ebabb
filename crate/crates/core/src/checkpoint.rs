//! Versioned binary parameter snapshots.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "BEVMAPCK"
//! version  u32      1
//! hash     u32 length + UTF-8 hex of RunConfig::model_hash
//! epoch    u32
//! count    u32
//! table    count x (name: u32 length + UTF-8, ndim: u32, dims: u32 x ndim)
//! data     f64 values of every tensor in table order, row-major
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEVMAPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config hash {found} does not match {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint parameter table does not match the model: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hash: String,
    pub epoch: u32,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn of(model: &Model, epoch: u32) -> Self {
        Self {
            hash: model.config.model_hash(),
            epoch,
            names: model.params.iter().map(|(n, _)| n.to_string()).collect(),
            tensors: model.params.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let put = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut b, CHECKPOINT_VERSION);
        put(&mut b, self.hash.len() as u32);
        b.extend_from_slice(self.hash.as_bytes());
        put(&mut b, self.epoch);
        put(&mut b, self.tensors.len() as u32);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            put(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            put(&mut b, t.ndim() as u32);
            for &d in t.shape() {
                put(&mut b, d as u32);
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
        }
        let hash = r.string()?;
        let epoch = r.u32()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            names.push(r.string()?);
            let ndim = r.u32()? as usize;
            shapes.push((0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?);
        }
        let mut tensors = Vec::with_capacity(count);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { hash, epoch, names, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&buf)
    }

    /// Copies the parameters into `model`; a config-hash mismatch is an error
    /// unless `force` is set.
    pub fn apply(&self, model: &mut Model, force: bool) -> Result<(), CheckpointError> {
        let expected = model.config.model_hash();
        if self.hash != expected && !force {
            return Err(CheckpointError::HashMismatch { expected, found: self.hash.clone() });
        }
        let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
        if names.len() != self.names.len() || names.iter().zip(&self.names).any(|(a, b)| a != b) {
            return Err(CheckpointError::Layout("parameter names differ".into()));
        }
        model.params.load_values(self.tensors.clone()).map_err(|e| CheckpointError::Layout(e.to_string()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .buf
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }
}
