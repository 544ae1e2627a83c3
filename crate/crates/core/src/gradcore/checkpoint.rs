//! Checkpoint files: a JSON manifest `<stem>.json` naming every tensor in
//! store order, and `<stem>.f64` holding their values as little-endian
//! 64-bit floats concatenated in that same order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamScalars;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<AdamScalars>,
    /// Free-form description of the model (architecture, hashes, ...).
    pub metadata: serde_json::Value,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f64"))
}

pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    optimizer: Option<AdamScalars>,
    metadata: serde_json::Value,
) -> Result<()> {
    let (manifest_path, data_path) = paths(stem);
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
        optimizer,
        metadata,
    };
    let mut bytes = Vec::new();
    for (_, p) in store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&data_path, bytes)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let (manifest_path, data_path) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint format_version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(&data_path)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint data {} holds {} bytes, manifest describes {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = chunks.by_ref().take(n).collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Data(format!("tensor {}: {e}", entry.name)))?;
        store.insert(entry.name.clone(), tensor, entry.trainable);
    }
    Ok((store, manifest))
}
