//! `cnav-ckpt-v1`: a JSON manifest plus a little-endian blob of `f64`s.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::ParamEntry;
use super::{DenseArray, ParamStore, TensorError};

pub const CHECKPOINT_VERSION: &str = "cnav-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub step: u64,
    pub m: BlobEntry,
    pub v: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub entries: Vec<BlobEntry>,
    pub optimizer: Vec<MomentEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub(crate) fn push_f64s(blob: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> BlobEntry {
    let byte_offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    BlobEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        dtype: "f64".into(),
        byte_offset,
        byte_len: blob.len() as u64 - byte_offset,
    }
}

pub(crate) fn read_f64s(blob: &[u8], entry: &BlobEntry) -> Result<Vec<f64>, TensorError> {
    if entry.dtype != "f64" {
        return Err(TensorError::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
    }
    let start = entry.byte_offset as usize;
    let end = start + entry.byte_len as usize;
    let expected = entry.shape.iter().product::<usize>() * 8;
    if end > blob.len() || entry.byte_len as usize != expected {
        return Err(TensorError::Checkpoint(format!("{}: byte range out of bounds", entry.name)));
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serializes a store, including optimizer moments and step counters.
pub fn encode_checkpoint(
    store: &ParamStore,
    metadata: BTreeMap<String, serde_json::Value>,
) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, e) in &store.entries {
        entries.push(push_f64s(&mut blob, name, e.value.shape(), e.value.data()));
    }
    let mut optimizer = Vec::new();
    for (name, e) in &store.entries {
        let m = push_f64s(&mut blob, name, e.value.shape(), &e.m);
        let v = push_f64s(&mut blob, name, e.value.shape(), &e.v);
        optimizer.push(MomentEntry {
            name: name.clone(),
            step: e.step,
            m,
            v,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.into(),
        entries,
        optimizer,
        metadata,
    };
    (manifest, blob)
}

pub fn decode_checkpoint(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ParamStore, TensorError> {
    if manifest.version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "version mismatch: expected {CHECKPOINT_VERSION}, found {}",
            manifest.version
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.entries {
        let data = read_f64s(blob, entry)?;
        store.insert(entry.name.clone(), DenseArray::new(entry.shape.clone(), data)?)?;
    }
    for moment in &manifest.optimizer {
        let m = read_f64s(blob, &moment.m)?;
        let v = read_f64s(blob, &moment.v)?;
        let entry: &mut ParamEntry = store
            .entries
            .get_mut(&moment.name)
            .ok_or_else(|| TensorError::Checkpoint(format!("moments for unknown parameter {}", moment.name)))?;
        if m.len() != entry.value.len() || v.len() != entry.value.len() {
            return Err(TensorError::Checkpoint(format!("{}: moment shape mismatch", moment.name)));
        }
        entry.m = m;
        entry.v = v;
        entry.step = moment.step;
    }
    Ok(store)
}

/// `<prefix>.json` and `<prefix>.bin`.
pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut json = prefix.as_os_str().to_owned();
    json.push(".json");
    let mut bin = prefix.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn save_checkpoint(
    store: &ParamStore,
    metadata: BTreeMap<String, serde_json::Value>,
    prefix: &Path,
) -> Result<(), TensorError> {
    let (manifest, blob) = encode_checkpoint(store, metadata);
    let (json_path, bin_path) = checkpoint_paths(prefix);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(&json_path, text + "\n")?;
    fs::write(&bin_path, blob)?;
    Ok(())
}

pub fn load_checkpoint(prefix: &Path) -> Result<(ParamStore, CheckpointManifest), TensorError> {
    let (json_path, bin_path) = checkpoint_paths(prefix);
    let text = fs::read_to_string(&json_path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", json_path.display())))?;
    let blob = fs::read(&bin_path)?;
    let store = decode_checkpoint(&manifest, &blob)?;
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{adamw_step, Gradients, OptimConfig};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(-1e6f64..1e6, 1..40),
            grad in -3.0f64..3.0,
            steps in 0u64..3,
        ) {
            let mut store = ParamStore::new();
            store.insert("b.vec", DenseArray::vector(values.clone())).unwrap();
            store.insert("a.scalar", DenseArray::scalar(values[0] * 0.5)).unwrap();
            let mut g = Gradients::zeros_like(&store);
            g.get_mut("b.vec").unwrap().data_mut().iter_mut().for_each(|x| *x = grad);
            for s in 1..=steps {
                adamw_step(&mut store, &g, &OptimConfig::default(), s).unwrap();
            }
            let (manifest, blob) = encode_checkpoint(&store, BTreeMap::new());
            let text = serde_json::to_string(&manifest).unwrap();
            let parsed: CheckpointManifest = serde_json::from_str(&text).unwrap();
            let back = decode_checkpoint(&parsed, &blob).unwrap();
            for (name, v) in store.iter() {
                let w = back.get(name).unwrap();
                prop_assert_eq!(v.shape(), w.shape());
                for (x, y) in v.data().iter().zip(w.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", DenseArray::scalar(1.0)).unwrap();
        let (mut manifest, blob) = encode_checkpoint(&store, BTreeMap::new());
        manifest.version = "cnav-ckpt-v0".into();
        let err = decode_checkpoint(&manifest, &blob).unwrap_err();
        assert!(err.to_string().contains("version mismatch"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("x.weight", DenseArray::matrix(2, 2, vec![1.0, -0.5, 0.25, 3.0]).unwrap()).unwrap();
        let prefix = dir.path().join("stage_1");
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), serde_json::json!(1));
        save_checkpoint(&store, meta, &prefix).unwrap();
        let (back, manifest) = load_checkpoint(&prefix).unwrap();
        assert_eq!(back, store);
        assert_eq!(manifest.entries[0].dtype, "f64");
        assert_eq!(manifest.entries[0].byte_len, 32);
        assert_eq!(manifest.metadata["stage"], 1);
    }
}
