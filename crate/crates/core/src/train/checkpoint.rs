//! Versioned binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PDCKPT\0\0" | u32 version | u64 header length | JSON header
//! | tensor payload (header order, raw LE scalars) | SHA-256 of all preceding bytes
//! ```
//!
//! The header names every tensor with its shape; the payload is their
//! concatenation. Network tensors use their parameter names, optimizer
//! slots are stored as `opt/<group>/<slot>/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerHeader;
use super::schedule::Stage;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Saturation};
use crate::models::{Group, ModelConfig, Networks};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub stage: Stage,
    /// Whether the stage ran to its last epoch.
    pub completed: bool,
    /// Completed epochs within the stage.
    pub epoch: usize,
    /// Iterations within the stage.
    pub iteration: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub rng: ChaCha8Rng,
    pub saturation: Saturation,
    /// Weight groups present in the archive.
    pub groups: Vec<Group>,
    pub optimizers: BTreeMap<Group, OptimizerHeader>,
    /// Class index per training identity (single-branch classifier only).
    pub classes: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Networks with the stored groups loaded; other groups keep their
    /// seeded initialization.
    pub fn networks(&self) -> Result<Networks<S>> {
        let mut nets = Networks::new(&self.header.model, &mut super::init_rng(self.header.train.seed))?;
        for &g in &self.header.groups {
            for p in nets.group_state_mut(g) {
                let t = self.tensors.get(p.name()).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {}", p.name())))?;
                if t.shape() != p.value().shape() {
                    return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, model expects {:?}", p.name(), t.shape(), p.value().shape())));
                }
                p.set(t.clone());
            }
        }
        Ok(nets)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            let t = self.tensors.get(&e.name).ok_or_else(|| Error::Checkpoint(format!("tensor {} missing from payload", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {} shape {:?} disagrees with header {:?}", e.name, t.shape(), e.shape)));
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint archive (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch: archive is corrupted or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])?;
        if header.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, expected {}", header.dtype, S::DTYPE)));
        }
        let mut tensors = BTreeMap::new();
        let mut pos = header_end;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * S::BYTES;
            if end > body.len() {
                return Err(corrupt("payload shorter than the header declares"));
            }
            let data = body[pos..end].chunks_exact(S::BYTES).map(S::read_le).collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
            pos = end;
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a half-written archive
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
