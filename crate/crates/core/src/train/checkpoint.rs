//! Checkpoint container. Byte layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LIQA"
//! version u32      1
//! meta    u32 length, then that many bytes of JSON (CheckpointMeta)
//! count   u32      number of tensors
//! tensor  u32 name length, name bytes,
//!         u32 rank, u64 * rank dims,
//!         f32 * prod(dims) payload
//! ```
//!
//! Loading reproduces every tensor bitwise; save → load → save yields
//! byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::params::ParamStore;

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"LIQA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {0} not supported")]
    Version(u32),
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name}: shape {found:?} does not match model {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsKind {
    /// Every parameter in the store.
    Full,
    /// Only parameters that were trainable (adapter deltas + head).
    AdaptersOnly,
    /// Full weights with adapter deltas folded into the base matrices.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: WeightsKind,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot parameters from a store. `AdaptersOnly` keeps the tensors
    /// that are currently trainable.
    pub fn from_store(store: &ParamStore<f32>, meta: CheckpointMeta) -> Self {
        let tensors = store
            .ids()
            .filter(|&id| meta.weights != WeightsKind::AdaptersOnly || store.requires_grad(id))
            .map(|id| NamedTensor {
                name: store.name(id).to_owned(),
                shape: store.shape(id).to_vec(),
                data: store.data(id).to_vec(),
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Copy tensors into a freshly built store by name. With `Full` or
    /// `Merged` weights every store parameter must be present.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        for t in &self.tensors {
            let id = store
                .lookup(&t.name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor {}", t.name)))?;
            if store.shape(id) != t.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    expected: store.shape(id).to_vec(),
                    found: t.shape.clone(),
                });
            }
            store.data_mut(id).copy_from_slice(&t.data);
        }
        if self.meta.weights != WeightsKind::AdaptersOnly {
            for id in store.ids() {
                let name = store.name(id);
                if !self.tensors.iter().any(|t| t.name == name) {
                    return Err(CheckpointError::MissingTensor(name.to_owned()));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::Corrupt("truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name not utf-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
