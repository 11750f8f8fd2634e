//! On-disk checkpoint format.
//!
//! A checkpoint is a directory: `manifest.json` names every parameter tensor
//! (name, shape, dtype, module path, blob file, content hash) plus the
//! config hash of the run that produced it; `tensors/` holds one binary blob
//! of little-endian f32 values per tensor. Directories are write-once.
//! Loading verifies every blob against its recorded hash (corruption error
//! on mismatch) and the tensor set against the target model (structural
//! mismatch listing the offending names).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{tensor_to_f32_bytes, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// First segment of the dotted name: "denoiser", "offsets", "encoder",
    /// "backbone", "embeddings".
    pub module: String,
    /// Blob file relative to the checkpoint root.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    /// Aggregate hash over all backbone tensors, when any are present, so
    /// runs sharing a frozen backbone can be cross-checked cheaply.
    pub backbone_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }
}

fn blob_name(tensor_name: &str) -> String {
    format!("tensors/{tensor_name}.bin")
}

/// Write every parameter of `store` under `dir`. Fails if `dir` already
/// holds a checkpoint.
pub fn save_checkpoint(store: &ParamStore, dir: &Path, config_hash: &str) -> Result<CheckpointManifest> {
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::contract(format!(
            "checkpoint directory {} already holds a manifest (write-once)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join("tensors"))?;
    let mut tensors = Vec::new();
    let mut backbone_hasher = Sha256::new();
    let mut has_backbone = false;
    for (name, var) in store.iter() {
        let bytes = tensor_to_f32_bytes(var.as_tensor())?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let sha = hex::encode(hasher.finalize());
        if name.starts_with("backbone.") {
            has_backbone = true;
            backbone_hasher.update(name.as_bytes());
            backbone_hasher.update(sha.as_bytes());
        }
        let file = blob_name(name);
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: var.dims().to_vec(),
            dtype: "f32".to_string(),
            module: name.split('.').next().unwrap_or("").to_string(),
            file,
            sha256: sha,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        backbone_hash: has_backbone.then(|| hex::encode(backbone_hasher.finalize())),
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read and hash-verify every tensor of a checkpoint, without needing a
/// model. Returns the manifest and the tensors on the store-independent CPU
/// device as f32.
pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, HashMap<String, Tensor>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Corruption(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corruption(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut tensors = HashMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Corruption(format!(
                "tensor {}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Corruption(format!("cannot read blob {}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        if hex::encode(hasher.finalize()) != entry.sha256 {
            return Err(Error::Corruption(format!(
                "tensor {}: blob hash mismatch (corrupted checkpoint)",
                entry.name
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(Error::Corruption(format!(
                "tensor {}: blob holds {} bytes, shape {:?} needs {}",
                entry.name,
                bytes.len(),
                entry.shape,
                numel * 4
            )));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(vals, entry.shape.as_slice(), &candle_core::Device::Cpu)?;
        tensors.insert(entry.name.clone(), t);
    }
    Ok((manifest, tensors))
}

/// Load a checkpoint into an existing model's parameter store. The tensor
/// sets must match exactly.
pub fn load_checkpoint(store: &mut ParamStore, dir: &Path) -> Result<CheckpointManifest> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    store.load(&tensors)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, TensorEnv};
    use crate::rng::RngStreams;
    use candle_core::DType;

    fn demo_store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(
            TensorEnv::cpu(DType::F32),
            RngStreams::new(seed).stream("init", 0),
        );
        s.param("denoiser.a.weight", &[4, 4], Init::Normal { std: 1.0 }).unwrap();
        s.param("offsets.mid.self.q.v0", &[8], Init::Normal { std: 0.02 }).unwrap();
        s.param("backbone.block0.conv.bias", &[3], Init::Normal { std: 1.0 }).unwrap();
        s
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(0);
        let manifest = save_checkpoint(&src, dir.path(), "cfg-hash").unwrap();
        assert_eq!(manifest.config_hash, "cfg-hash");
        assert!(manifest.backbone_hash.is_some());
        assert_eq!(manifest.entry("denoiser.a.weight").unwrap().module, "denoiser");
        let mut dst = demo_store(99);
        assert_ne!(src.hashes().unwrap(), dst.hashes().unwrap());
        load_checkpoint(&mut dst, dir.path()).unwrap();
        assert_eq!(src.hashes().unwrap(), dst.hashes().unwrap());
    }

    #[test]
    fn checkpoints_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(1);
        save_checkpoint(&src, dir.path(), "h").unwrap();
        assert!(save_checkpoint(&src, dir.path(), "h").is_err());
    }

    #[test]
    fn corrupted_blob_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(2);
        save_checkpoint(&src, dir.path(), "h").unwrap();
        let blob = dir.path().join("tensors/denoiser.a.weight.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&blob, &bytes).unwrap();
        let mut dst = demo_store(3);
        match load_checkpoint(&mut dst, dir.path()) {
            Err(Error::Corruption(msg)) => assert!(msg.contains("denoiser.a.weight"), "{msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(4);
        save_checkpoint(&src, dir.path(), "h").unwrap();
        let blob = dir.path().join("tensors/offsets.mid.self.q.v0.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..8]).unwrap();
        let mut dst = demo_store(5);
        assert!(matches!(
            load_checkpoint(&mut dst, dir.path()),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn malformed_manifest_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(6);
        save_checkpoint(&src, dir.path(), "h").unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{not json").unwrap();
        let mut dst = demo_store(7);
        assert!(matches!(
            load_checkpoint(&mut dst, dir.path()),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn structural_mismatch_lists_names() {
        let dir = tempfile::tempdir().unwrap();
        let src = demo_store(8);
        save_checkpoint(&src, dir.path(), "h").unwrap();
        let mut other = ParamStore::new(
            TensorEnv::cpu(DType::F32),
            RngStreams::new(9).stream("init", 0),
        );
        other.param("denoiser.a.weight", &[4, 4], Init::Zeros).unwrap();
        other.param("denoiser.b.weight", &[2], Init::Zeros).unwrap();
        match load_checkpoint(&mut other, dir.path()) {
            Err(Error::StructuralMismatch(msg)) => {
                assert!(msg.contains("denoiser.b.weight") || msg.contains("offsets"), "{msg}");
            }
            other => panic!("expected structural mismatch, got {other:?}"),
        }
    }
}
