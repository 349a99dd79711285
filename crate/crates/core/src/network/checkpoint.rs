//! Checkpoint container:
//!
//! ```text
//! "MSMCKPT1" | u32 LE header length | JSON header | f32 LE payloads | SHA-256
//! ```
//!
//! The digest covers every preceding byte. Tensor offsets in the header are
//! byte offsets into the payload section.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Params;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<CheckpointTensor>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            seed: model.seed,
            tensors: model
                .named_parameters("")
                .into_iter()
                .map(|(name, t)| CheckpointTensor { name, shape: t.shape().to_vec(), data: t.to_vec() })
                .collect(),
            meta: model.meta.clone(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    /// Tensors not belonging to the model are ignored.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let model = build_model::<f32>(&self.config, self.seed)?;
        let by_name: HashMap<&str, &CheckpointTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, param) in model.named_parameters("") {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if src.shape != param.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape,
                    param.shape()
                )));
            }
            param.set_data(src.data.clone())?;
        }
        let mut model = model;
        model.meta = self.meta.clone();
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("checkpoint tensor {} has inconsistent shape", t.name)));
            }
            entries.push(Entry { name: t.name.clone(), shape: t.shape.clone(), offset });
            offset += 4 * t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Format(format!("checkpoint truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Digest);
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[12..header_end])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: header.format_version, expected: CHECKPOINT_VERSION });
        }
        let payload = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let bytes = e
                .offset
                .checked_add(4 * n)
                .and_then(|end| payload.get(e.offset..end))
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", e.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(CheckpointTensor { name: e.name, shape: e.shape, data });
        }
        Ok(Checkpoint { config: header.config, seed: header.seed, tensors, meta: header.meta })
    }
}

/// Writes via a temporary sibling and a rename, so readers never observe
/// a partial file.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(&Checkpoint::from_model(model), path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_checkpoint(path)?.to_model()
}
