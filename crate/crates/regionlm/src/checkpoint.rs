//! Checkpoint archive: a fixed header, a JSON manifest (config, stage
//! provenance, per-parameter shapes and content hashes), then every
//! parameter as raw little-endian f64 in manifest order.
//!
//! Round trips are bit-exact; any mismatch between manifest and payload is
//! `CorruptArchive`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, GROUPS};
use crate::ModelError;

const MAGIC: &[u8; 8] = b"RGNLM\0CK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    /// Completed stage labels, oldest first.
    provenance: Vec<String>,
    params: Vec<ParamEntry>,
}

fn io_err(path: &Path, source: io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptArchive(msg.into())
}

fn param_bytes(view: &ndarray::ArrayViewD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(view.len() * 8);
    for &v in view.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    for group in GROUPS {
        let names = model_param_names(model, group);
        let views = model.group_views(group).expect("known group");
        for (name, view) in names.into_iter().zip(views) {
            let bytes = param_bytes(&view);
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            params.push(ParamEntry {
                group: group.to_string(),
                name,
                shape: view.shape().to_vec(),
                sha256: hex(&hasher.finalize()),
            });
            payload.extend_from_slice(&bytes);
        }
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        provenance: model.provenance.clone(),
        params,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| corrupt(format!("manifest encode: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + manifest_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let data = fs::read(path).map_err(|e| io_err(path, e))?;
    load_checkpoint_bytes(&data)
}

/// Decodes an archive already in memory. Entry point for untrusted input:
/// every malformation maps to `CorruptArchive`, never a panic.
pub fn load_checkpoint_bytes(data: &[u8]) -> Result<Model, CheckpointError> {
    if data.len() < MAGIC.len() + 12 {
        return Err(corrupt("file shorter than header"));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut off = MAGIC.len();
    let version = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
    off += 4;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(data[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if data.len() < off + manifest_len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&data[off..off + manifest_len])
        .map_err(|e| corrupt(format!("manifest decode: {e}")))?;
    off += manifest_len;
    let mut model = Model::new(manifest.config)?;
    model.provenance = manifest.provenance;
    let mut entry_idx = 0usize;
    for group in GROUPS {
        let names = model_param_names(&model, group);
        let n_views = names.len();
        // collect expected (name, len) pairs first; the mutable views
        // cannot coexist with reads of `model`
        let shapes: Vec<Vec<usize>> =
            model.group_views(group).expect("known group").iter().map(|v| v.shape().to_vec()).collect();
        let mut views = model.group_views_mut(group).expect("known group");
        for i in 0..n_views {
            let entry = manifest
                .params
                .get(entry_idx)
                .ok_or_else(|| corrupt("manifest lists fewer parameters than the model"))?;
            if entry.group != group || entry.name != names[i] {
                return Err(corrupt(format!(
                    "manifest entry {entry_idx} is {}/{}, expected {group}/{}",
                    entry.group, entry.name, names[i]
                )));
            }
            if entry.shape != shapes[i] {
                return Err(corrupt(format!(
                    "shape {:?} for {group}/{} does not match model shape {:?}",
                    entry.shape, names[i], shapes[i]
                )));
            }
            let n: usize = entry.shape.iter().product();
            let nbytes = n * 8;
            if data.len() < off + nbytes {
                return Err(corrupt("truncated payload"));
            }
            let bytes = &data[off..off + nbytes];
            let mut hasher = Sha256::new();
            hasher.update(bytes);
            if hex(&hasher.finalize()) != entry.sha256 {
                return Err(corrupt(format!("content hash mismatch for {group}/{}", names[i])));
            }
            let view = &mut views[i];
            let slice = view.as_slice_mut().expect("parameters are contiguous");
            for (dst, chunk) in slice.iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            off += nbytes;
            entry_idx += 1;
        }
    }
    if entry_idx != manifest.params.len() {
        return Err(corrupt("manifest lists more parameters than the model"));
    }
    if off != data.len() {
        return Err(corrupt(format!("{} trailing bytes after payload", data.len() - off)));
    }
    Ok(model)
}

fn model_param_names(model: &Model, group: &str) -> Vec<String> {
    model
        .param_manifest()
        .into_iter()
        .filter(|(g, _, _)| g == group)
        .map(|(_, n, _)| n)
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
