//! Parameter container: a JSON manifest plus one blob of little-endian `f32`s.
//!
//! `save_checkpoint(dir, "final", store)` writes `dir/final.json` and
//! `dir/final.bin`. Tensors appear in the blob in manifest order; each entry
//! records its byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<CheckpointEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `store` as `<dir>/<stem>.json` + `<dir>/<stem>.bin`; returns the manifest path.
pub fn save_checkpoint(dir: &Path, stem: &str, store: &ParamStore) -> Result<PathBuf> {
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.dims(),
            offset: blob.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        blob: blob_name.clone(),
        tensors,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&json_path, e))?;
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    Ok(json_path)
}

/// Reads every tensor listed in a manifest, in manifest order.
pub fn read_checkpoint(manifest_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| io_err(manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    manifest
        .tensors
        .into_iter()
        .map(|entry| {
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len * 4;
            let bytes = blob.get(entry.offset..end).ok_or_else(|| {
                TensorError::Checkpoint(format!("tensor {} runs past the blob end", entry.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok((entry.name, Tensor::from_vec(entry.shape, data)?))
        })
        .collect()
}

/// Restores every parameter of `store` from a checkpoint, matching by name.
pub fn load_checkpoint(manifest_path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = read_checkpoint(manifest_path)?;
    for (name, tensor) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name:?}")))?;
        let param = store.get_mut(id);
        if param.value.shape() != tensor.shape() {
            return Err(TensorError::Checkpoint(format!(
                "parameter {name:?}: shape {:?} does not match {:?}",
                tensor.dims(),
                param.value.dims()
            )));
        }
        param.value = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .add("a", Tensor::from_vec([1, 1, 1, 3], vec![1.0, -0.0, f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        store.add("b", Tensor::full([2, 1, 2, 1], 0.1)).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &store).unwrap();

        let mut restored = ParamStore::new();
        restored.add("a", Tensor::zeros([1, 1, 1, 3])).unwrap();
        restored.add("b", Tensor::zeros([2, 1, 2, 1])).unwrap();
        load_checkpoint(&path, &mut restored).unwrap();
        assert_eq!(restored.fingerprint(), store.fingerprint());

        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest.tensors[1].offset, 12);
        assert_eq!(fs::read(dir.path().join("ck.bin")).unwrap().len(), 4 * 7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros([1, 1, 1, 3])).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &store).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros([1, 1, 3, 1])).unwrap();
        assert!(load_checkpoint(&path, &mut other).is_err());
    }
}
