//! Named parameter collections and the on-disk checkpoint format.
//!
//! A checkpoint is a pair of files: `<stem>.json`, a manifest listing
//! (name, shape, dtype, byte offset) per tensor plus free-form metadata,
//! and `<stem>.bin`, the tensors' values as little-endian f32 concatenated
//! in manifest order. Values are stored in f32 regardless of the working
//! precision.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone)]
pub struct ParameterSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order; this order defines checkpoint layout.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast_to<T: Scalar>(&self) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast_to::<T>());
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

const FORMAT_TAG: &str = "tirsiam-checkpoint-v1";

fn bin_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Write `<path>` (JSON manifest) and the sibling `.bin` payload.
pub fn save_checkpoint<S: Scalar>(
    params: &ParameterSet<S>,
    path: &Path,
    meta: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::with_capacity(params.total_values() * 4);
    for (name, t) in params.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        });
        for v in t.data() {
            let bits = (v.to_f32().expect("finite parameter")).to_le_bytes();
            payload.extend_from_slice(&bits);
        }
        offset += (t.numel() * 4) as u64;
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        meta,
        tensors,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut jf = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut jf, &manifest)?;
    jf.write_all(b"\n")?;
    std::fs::File::create(bin_path(path))?.write_all(&payload)?;
    Ok(())
}

/// Read a checkpoint pair back; values are widened into `S`.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParameterSet<S>, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_reader(std::fs::File::open(path)?)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: format!("unknown checkpoint format {:?}", manifest.format),
        });
    }
    let bp = bin_path(path);
    if !bp.exists() {
        return Err(Error::MissingFile(bp.display().to_string()));
    }
    let mut payload = Vec::new();
    std::fs::File::open(&bp)?.read_to_end(&mut payload)?;

    let mut params = ParameterSet::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                detail: format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Malformed {
                path: bp.display().to_string(),
                detail: format!("tensor {} extends past end of payload", entry.name),
            });
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let mut b = [0u8; 4];
            b.copy_from_slice(&payload[start + 4 * i..start + 4 * i + 4]);
            data.push(cast::<S>(f32::from_le_bytes(b) as f64));
        }
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((params, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn insert_replaces_in_place() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("a", Tensor::scalar(1.0));
        p.insert("b", Tensor::scalar(2.0));
        p.insert("a", Tensor::scalar(3.0));
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("a").unwrap().data(), &[3.0]);
        assert_eq!(p.names(), vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join("tirsiam_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");

        let mut rng = SplitMix64::new(77);
        let mut p = ParameterSet::<f32>::new();
        p.insert("conv.w", Tensor::randn(&[2, 1, 3, 3], 0.3, &mut rng));
        p.insert("conv.b", Tensor::randn(&[2], 0.1, &mut rng));
        save_checkpoint(&p, &path, serde_json::json!({"epoch": 3})).unwrap();

        let (q, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta["epoch"], 3);
        assert_eq!(q.names(), p.names());
        for (name, t) in p.iter() {
            assert_eq!(q.get(name).unwrap(), t, "tensor {name} changed");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_checkpoint_is_named() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/model.json")).unwrap_err();
        match err {
            Error::MissingFile(p) => assert!(p.contains("nonexistent")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
