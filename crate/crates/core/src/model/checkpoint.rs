//! Checkpoint archives: a directory holding `manifest.toml` (config,
//! vocabulary hash, tensor table) and `params.bin` (all tensors as
//! little-endian `f32`, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "zsmt-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub vocab_hash: String,
    pub blob_bytes: usize,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Checkpoint directory name for an epoch.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt-epoch{epoch:03}")
}

pub fn save_checkpoint<T: Scalar>(model: &TransformerModel<T>, vocab_hash: &str, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.params().num_scalars() * 4);
    let mut tensors = Vec::new();
    for (_, name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f32".into(),
        vocab_hash: vocab_hash.into(),
        blob_bytes: blob.len(),
        config: model.config().clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = toml::from_str(&text)?;
    if m.format != FORMAT || m.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} / dtype {}",
            m.format, m.dtype
        )));
    }
    Ok(m)
}

/// Load a checkpoint; when `vocab_hash` is given it must match the stored one.
pub fn load_checkpoint<T: Scalar>(dir: &Path, vocab_hash: Option<&str>) -> Result<(TransformerModel<T>, Manifest)> {
    let m = read_manifest(dir)?;
    if let Some(h) = vocab_hash {
        if h != m.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {}, supplied {h}",
                m.vocab_hash
            )));
        }
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != m.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            m.blob_bytes
        )));
    }
    let mut store = ParamStore::default();
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let model = TransformerModel::from_params(m.config.clone(), store)?;
    Ok((model, m))
}
