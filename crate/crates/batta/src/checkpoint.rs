//! Single-file checkpoint: magic, JSON header, then little-endian f32 data.
//!
//! ```text
//! b"BATTA1" | u64 header_len | header JSON | tensor bytes...
//! ```

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::params::Weights;

pub const MAGIC: &[u8; 6] = b"BATTA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub lr: f64,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub loss_curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: TrainingMetadata,
    pub weights: Weights,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Inference model built from these weights; fails if any shape disagrees
    /// with the config.
    pub fn model(&self) -> Result<SegModel> {
        SegModel::from_weights(&self.config, &self.weights)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.weights.len());
        let mut data = Vec::new();
        for (name, t) in &self.weights {
            let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset: data.len(),
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic; not a BATTA1 checkpoint"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[6..14]);
        let header_len = u64::from_le_bytes(len) as usize;
        let body = 14usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[14..body])?;
        let data = &bytes[body..];
        let mut weights = Weights::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry
                .offset
                .checked_add(n * 4)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| corrupt(format!("tensor {} out of bounds", entry.name)))?;
            let values: Vec<f32> = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, entry.shape, &Device::Cpu)?;
            weights.insert(entry.name, t);
        }
        let ckpt = Self {
            config: header.config,
            metadata: header.metadata,
            weights,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Every weight the config expects is present with the right shape, and
    /// nothing else is.
    pub fn check_shapes(&self) -> Result<()> {
        let (_, fresh) = SegModel::init(&self.config)?;
        let expected = fresh.vars();
        for (name, var) in &expected {
            match self.weights.get(name) {
                Some(t) if t.dims() == var.dims() => {}
                Some(t) => {
                    return Err(corrupt(format!(
                        "{name}: shape {:?}, config expects {:?}",
                        t.dims(),
                        var.dims()
                    )))
                }
                None => return Err(corrupt(format!("missing tensor {name}"))),
            }
        }
        if let Some(extra) = self.weights.keys().find(|k| !expected.contains_key(*k)) {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
