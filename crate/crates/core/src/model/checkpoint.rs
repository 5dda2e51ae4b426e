//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NORMACK1" | u32 version | u32 header_len | header JSON
//! u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u64 dims..., f64 data...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::ModelConfig;
use super::params::ParamStore;
use super::ModelError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NORMACK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub trained: bool,
    pub seed: u64,
    pub epochs: usize,
    pub best_val_loss: Option<f64>,
    /// Analyte codes in embedding order.
    pub analytes: Vec<String>,
    /// Train/validation/test patient fractions the plan split with.
    #[serde(default)]
    pub fractions: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Corrupt("truncated".into()));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
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
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let magic = read_bytes(&mut r, 8).map_err(|_| CheckpointError::BadMagic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(&read_bytes(&mut r, hlen)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = read_bytes(&mut r, count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(ModelError::from)?;
            names.push(name);
            tensors.push(t);
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        let params = ParamStore::from_parts(names, tensors);
        header.config.validate()?;
        params.check_layout(&header.config, header.meta.analytes.len())?;
        Ok(Self {
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Lower-case hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String, CheckpointError> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Fails unless the checkpoint came out of a training run.
    pub fn require_trained(&self) -> Result<(), ModelError> {
        if self.meta.trained {
            Ok(())
        } else {
            Err(ModelError::Untrained)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytes::AnalyteTable;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig::eicu_default().with_dims(8, 1, 2);
        let table = AnalyteTable::shipped();
        Checkpoint {
            params: ParamStore::init(&cfg, table.len(), 3).unwrap(),
            config: cfg,
            meta: CheckpointMeta {
                analytes: table.iter().map(|a| a.code.clone()).collect(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(CheckpointError::BadMagic)));
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn untrained_is_refused() {
        assert_eq!(ckpt().require_trained(), Err(ModelError::Untrained));
    }
}
