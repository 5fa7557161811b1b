//! Checkpoint directories: one raw little-endian `f32` blob per tensor and a
//! JSON manifest listing names, shapes and optimizer-state blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub optimizer_state: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub learning_rate: f64,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor to persist, with its optional RMSProp accumulator.
pub struct NamedTensor<'a> {
    pub name: &'a str,
    pub tensor: &'a Tensor<f32>,
    pub optimizer_state: Option<&'a [f32]>,
}

#[derive(Clone, Debug)]
pub struct LoadedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub optimizer_state: Option<Vec<f32>>,
}

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(TensorError::Checkpoint(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn blob_name(name: &str, suffix: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}{suffix}")
}

pub fn save_checkpoint(dir: &Path, tensors: &[NamedTensor<'_>], step: u64, learning_rate: f64) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = blob_name(t.name, ".f32");
        write_f32_blob(&dir.join(&file), t.tensor.data())?;
        let optimizer_state = match t.optimizer_state {
            Some(v) => {
                if v.len() != t.tensor.numel() {
                    return Err(TensorError::Checkpoint(format!(
                        "optimizer state for {} has {} values, tensor has {}",
                        t.name,
                        v.len(),
                        t.tensor.numel()
                    )));
                }
                let f = blob_name(t.name, ".rms.f32");
                write_f32_blob(&dir.join(&f), v)?;
                Some(f)
            }
            None => None,
        };
        entries.push(TensorEntry {
            name: t.name.to_string(),
            shape: t.tensor.shape().to_vec(),
            file,
            optimizer_state,
        });
    }
    let manifest = CheckpointManifest {
        step,
        learning_rate,
        tensors: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<LoadedTensor>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel = e.shape.iter().product();
        let tensor = Tensor::from_vec(e.shape.clone(), read_f32_blob(&dir.join(&e.file), numel)?)?;
        let optimizer_state = e
            .optimizer_state
            .as_ref()
            .map(|f| read_f32_blob(&dir.join(f), numel))
            .transpose()?;
        out.push(LoadedTensor {
            name: e.name.clone(),
            tensor,
            optimizer_state,
        });
    }
    Ok((manifest, out))
}
