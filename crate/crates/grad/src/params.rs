//! Named parameter storage and the checkpoint format.
//!
//! A checkpoint is two files next to each other: `<stem>.json`, a manifest
//! listing tensor names and shapes in order plus free-form hyperparameters,
//! and `<stem>.bin`, the tensors' values as little-endian `f64` concatenated
//! in manifest order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{GradError, Result};

/// Ordered collection of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new tensor; panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Array {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    hyperparameters: serde_json::Value,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    blob_crc32: u32,
}

const FORMAT: &str = "fusion-grad-checkpoint";
const VERSION: u32 = 1;

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `params` and `hyperparameters` to `<stem>.json` / `<stem>.bin`.
pub fn save_checkpoint(
    stem: &Path,
    params: &ParamStore,
    hyperparameters: &serde_json::Value,
) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    for v in params.values() {
        for x in v.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        hyperparameters: hyperparameters.clone(),
        tensors: params
            .iter()
            .map(|(n, a)| TensorEntry {
                name: n.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        blob_bytes: blob.len() as u64,
        blob_crc32: crc32fast::hash(&blob),
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::File::create(&blob_path)?.write_all(&blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let (manifest_path, blob_path) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(GradError::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = fs::read(&blob_path)?;
    if blob.len() as u64 != manifest.blob_bytes || crc32fast::hash(&blob) != manifest.blob_crc32 {
        return Err(GradError::Checkpoint(format!(
            "{} is truncated or corrupt",
            blob_path.display()
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > blob.len() {
            return Err(GradError::Checkpoint("tensor extends past blob".into()));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(entry.name, Array::new(entry.shape, data)?);
        offset = end;
    }
    if offset != blob.len() {
        return Err(GradError::Checkpoint("blob has trailing bytes".into()));
    }
    Ok((store, manifest.hyperparameters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut p = ParamStore::new();
        p.insert(
            "a.w",
            Array::from_vec(&[2, 2], vec![0.1, -1e-300, 3.5, f64::MIN_POSITIVE]),
        );
        p.insert("a.b", Array::from_vec(&[3], vec![1.0 / 3.0, 2.0, -0.0]));
        let hyper = serde_json::json!({"embed_dim": 4});
        save_checkpoint(&stem, &p, &hyper).unwrap();
        let (q, h) = load_checkpoint(&stem).unwrap();
        assert_eq!(h, hyper);
        assert_eq!(q.names(), p.names());
        for (a, b) in p.values().iter().zip(q.values()) {
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut p = ParamStore::new();
        p.insert("w", Array::zeros(&[4]));
        save_checkpoint(&stem, &p, &serde_json::Value::Null).unwrap();
        let blob = stem.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&stem),
            Err(GradError::Checkpoint(_))
        ));
    }
}
