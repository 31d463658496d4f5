//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every tensor's `f32` values little-endian in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::OptimizerKind;
use crate::digest::write_atomic;

const MAGIC: &[u8; 8] = b"GRCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint holds {found:?} where {expected} was expected")]
    WrongKind { expected: String, found: String },
    #[error("tensor {name}: expected {expected} values, checkpoint has {found}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub buffers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"seg"` or `"purity"`.
    pub kind: String,
    pub phase: String,
    pub epoch: usize,
    pub config_digest: String,
    pub topology: serde_json::Value,
    pub frozen: bool,
    /// Free-form model flags (e.g. per-branch trainability).
    #[serde(default)]
    pub flags: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Parameters first, then optimizer buffers (`optim.<i>`).
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let values: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(CheckpointError::Truncated {
                expected: body,
                found: bytes.len(),
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
        let values: usize = header.tensors.iter().map(|t| t.len).sum();
        let expected = body + 4 * values;
        if bytes.len() != expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut at = body;
        for t in &header.tensors {
            let v = bytes[at..at + 4 * t.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(v);
            at += 4 * t.len;
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.header.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.to_string(),
                found: self.header.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&[f32], CheckpointError> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.tensors[i].as_slice())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Optimizer buffers stored after the parameters, if any.
    pub fn optimizer_buffers(&self) -> Vec<Vec<f32>> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter(|(e, _)| e.name.starts_with("optim."))
            .map(|(_, t)| t.clone())
            .collect()
    }
}
