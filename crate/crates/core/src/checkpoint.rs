//! Checkpoint files.
//!
//! Layout: the magic `UECK`, a u32 format version, a u64 manifest length,
//! the manifest as JSON, then every parameter's values back to back in
//! little-endian order. The manifest records the model configuration, the
//! resolved run configuration, a parameter inventory and the SHA-256 of the
//! value region.

use std::path::Path;

use ndtensor::Real;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::params::ParamKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: ParamKind,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Fully resolved run configuration, kept for provenance.
    pub run: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub content_sha256: String,
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::format("checkpoint", format!("unsupported dtype `{other}`"))),
    }
}

fn push_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        match T::DTYPE {
            "f32" => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
}

fn read_values<T: Real>(bytes: &[u8]) -> Vec<T> {
    match T::DTYPE {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>, run: &serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for (_, p) in net.store.iter() {
        let offset = blob.len() as u64;
        push_values(&mut blob, p.tensor.data());
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            kind: p.kind,
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: net.config().clone(),
        run: run.clone(),
        params,
        content_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Reads only the manifest, after checking the content hash.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing UECK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(bad(format!("manifest says version {}, header says {version}", manifest.format_version)));
    }
    let blob = &bytes[16 + len..];
    let digest = hex::encode(Sha256::digest(blob));
    if digest != manifest.content_sha256 {
        return Err(bad("content hash mismatch".into()));
    }
    Ok((manifest, blob))
}

/// Rebuilds the network described by the manifest and fills in its values.
/// Any disagreement between the inventory and the rebuilt network is an
/// error.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Network<T>, Manifest)> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let (manifest, blob) = decode_manifest(bytes)?;
    let mut net = Network::<T>::new(&manifest.model)?;
    if manifest.params.len() != net.store.len() {
        return Err(bad(format!(
            "{} parameters stored, the configured model has {}",
            manifest.params.len(),
            net.store.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (entry, param) in manifest.params.iter().zip(net.store.iter_mut()) {
        if entry.name != param.name || entry.shape != param.tensor.shape() || entry.kind != param.kind {
            return Err(bad(format!(
                "stored `{}` {:?} does not match model `{}` {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.tensor.shape()
            )));
        }
        if entry.dtype != T::DTYPE {
            return Err(bad(format!("`{}` is {}, expected {}", entry.name, entry.dtype, T::DTYPE)));
        }
        let nbytes = (param.tensor.numel() * width(&entry.dtype)?) as u64;
        if entry.nbytes != nbytes || entry.offset != expected_offset {
            return Err(bad(format!("`{}` has a blob of the wrong size or position", entry.name)));
        }
        let start = entry.offset as usize;
        let bytes = blob
            .get(start..start + nbytes as usize)
            .ok_or_else(|| bad(format!("`{}` runs past the end of the file", entry.name)))?;
        param.tensor.data_mut().copy_from_slice(&read_values::<T>(bytes));
        expected_offset += nbytes;
    }
    if expected_offset != blob.len() as u64 {
        return Err(bad(format!("{} trailing bytes", blob.len() as u64 - expected_offset)));
    }
    Ok((net, manifest))
}

/// Writes to a temporary sibling and renames, so a failed write never
/// leaves a partial checkpoint behind.
pub fn save_checkpoint<T: Real>(path: &Path, net: &Network<T>, run: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(net, run)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists that it was built with `expected`.
pub fn load_checkpoint_for<T: Real>(path: &Path, expected: &ModelConfig) -> Result<Network<T>> {
    let (net, manifest) = load_checkpoint(path)?;
    if &manifest.model != expected {
        return Err(Error::Config("checkpoint model configuration differs from the requested one".into()));
    }
    Ok(net)
}
