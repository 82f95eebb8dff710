//! Checkpoints: `manifest.json` plus `tensors.bin`, a concatenation of all
//! tensors as little-endian `f32`, row-major, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use bcomm_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::commnet::{Architecture, CommPolicyParams};
use crate::envs::EnvConfig;
use crate::trainer::{BaselineKind, ValueParams};
use crate::CoreError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length in the blob.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub id: String,
    pub architecture: Architecture,
    pub env: EnvConfig,
    pub baseline: BaselineKind,
    pub value_state_dim: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub iteration: usize,
    pub seed: u64,
    pub created_at: String,
}

/// Loaded parameters and their manifest.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub policy: CommPolicyParams,
    pub value: Option<ValueParams>,
}

/// Write `dir/manifest.json` and `dir/tensors.bin`; the checkpoint id is the
/// directory name.
pub fn save_checkpoint(
    dir: &Path,
    policy: &CommPolicyParams,
    value: Option<&ValueParams>,
    env: &EnvConfig,
    iteration: usize,
    seed: u64,
) -> Result<CheckpointManifest, CoreError> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let mut named: Vec<(String, &Tensor)> = policy
        .names()
        .into_iter()
        .map(String::from)
        .zip(&policy.tensors)
        .collect();
    if let Some(v) = value {
        for ((name, _), t) in ValueParams::layout(v.state_dim, v.hidden).into_iter().zip(&v.tensors) {
            named.push((name.to_string(), t));
        }
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = blob.len();
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        id,
        architecture: policy.arch,
        env: *env,
        baseline: if value.is_some() {
            BaselineKind::Centralized
        } else {
            BaselineKind::Zero
        },
        value_state_dim: value.map(|v| v.state_dim),
        tensors,
        iteration,
        seed,
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| CoreError::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| CoreError::Json {
        path: manifest_path.clone(),
        source,
    })?;
    fs::write(&manifest_path, text).map_err(|e| CoreError::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Read and version-check a manifest.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| CoreError::Json {
            path: path.clone(),
            source,
        })?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CoreError::Corrupt(format!("{}: no format_version", path.display())))?;
    if found != FORMAT_VERSION as u64 {
        return Err(CoreError::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|source| CoreError::Json { path, source })
}

fn take_tensor(
    manifest: &CheckpointManifest,
    blob: &[u8],
    name: &str,
    shape: &[usize],
) -> Result<Tensor, CoreError> {
    let mut hits = manifest.tensors.iter().filter(|t| t.name == name);
    let entry = hits
        .next()
        .ok_or_else(|| CoreError::MissingTensor(name.to_string()))?;
    if hits.next().is_some() {
        return Err(CoreError::Corrupt(format!("tensor {name:?} listed twice")));
    }
    if entry.shape != shape {
        return Err(CoreError::Corrupt(format!(
            "tensor {name:?} has shape {:?}, architecture expects {shape:?}",
            entry.shape
        )));
    }
    let numel: usize = shape.iter().product();
    if entry.length != numel * 4 {
        return Err(CoreError::Corrupt(format!(
            "tensor {name:?} spans {} bytes, expected {}",
            entry.length,
            numel * 4
        )));
    }
    let end = entry.offset + entry.length;
    if end > blob.len() {
        return Err(CoreError::Corrupt(format!(
            "blob holds {} bytes but tensor {name:?} ends at {end}",
            blob.len()
        )));
    }
    let data = blob[entry.offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CoreError> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| CoreError::io(&blob_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.length).sum();
    if blob.len() != expected {
        return Err(CoreError::Corrupt(format!(
            "{}: {} bytes, manifest describes {expected}",
            blob_path.display(),
            blob.len()
        )));
    }
    let arch = manifest.architecture;
    let tensors = arch
        .layout()
        .into_iter()
        .map(|(name, shape)| take_tensor(&manifest, &blob, name, &shape))
        .collect::<Result<Vec<_>, _>>()?;
    let policy = CommPolicyParams::from_tensors(arch, tensors)?;
    let value = match manifest.value_state_dim {
        Some(sd) => {
            let hidden = manifest
                .tensors
                .iter()
                .find(|t| t.name == "value.w1")
                .and_then(|t| t.shape.get(1).copied())
                .ok_or_else(|| CoreError::MissingTensor("value.w1".into()))?;
            let tensors = ValueParams::layout(sd, hidden)
                .into_iter()
                .map(|(name, shape)| take_tensor(&manifest, &blob, name, &shape))
                .collect::<Result<Vec<_>, _>>()?;
            Some(ValueParams::from_tensors(sd, tensors)?)
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        policy,
        value,
    })
}

/// Manifests of every checkpoint directly under `root`, sorted by id.
pub fn list_checkpoints(root: &Path) -> Result<Vec<CheckpointManifest>, CoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(CoreError::io(root, e)),
    };
    for entry in entries {
        let path: PathBuf = entry.map_err(|e| CoreError::io(root, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            out.push(read_manifest(&path)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
