//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `BVAECKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f64` in
//! manifest order. Batch-norm running statistics are included, so a loaded
//! model predicts bit for bit like the saved one.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Normalization;
use crate::model::{Model, ModelConfig};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 8] = b"BVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub trained: bool,
    pub normalization: Option<Normalization>,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
}

pub fn to_bytes(model: &mut Model) -> Result<Vec<u8>> {
    let tensors = model.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, shape, values) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        trained: model.trained,
        normalization: model.normalization.clone(),
        tensors: entries,
        payload_len: offset,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its manifest and payload values.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, Vec<f64>)> {
    let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(corrupt("manifest extends past end of file"));
    }
    // Check the version before the full schema so old files fail clearly.
    let raw: serde_json::Value =
        serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("manifest has no format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_len * 8 {
        return Err(corrupt(&format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_len * 8
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    for t in &manifest.tensors {
        if t.offset + t.len > manifest.payload_len || t.shape.iter().product::<usize>() != t.len {
            return Err(corrupt(&format!("tensor `{}` has an inconsistent directory entry", t.name)));
        }
    }
    Ok((manifest, values))
}

fn restore(manifest: Manifest, values: &[f64], config: &ModelConfig) -> Result<Model> {
    let mut model = Model::from_config(config)?;
    let mut by_name: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut failure = None;
    model.visit("", &mut |slot| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(slot.name.as_str()) {
            None => failure = Some(Error::CheckpointCorrupt(format!("tensor `{}` is missing", slot.name))),
            Some(t) if t.shape != slot.shape => {
                failure = Some(Error::CheckpointShape {
                    name: slot.name.clone(),
                    expected: slot.shape.clone(),
                    found: t.shape.clone(),
                })
            }
            Some(t) => slot.value.copy_from_slice(&values[t.offset..t.offset + t.len]),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::CheckpointCorrupt(format!(
            "tensor `{extra}` does not belong to this model"
        )));
    }
    model.trained = manifest.trained;
    model.normalization = manifest.normalization;
    Ok(model)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (manifest, values) = read_manifest(bytes)?;
    let config = manifest.config.clone();
    restore(manifest, &values, &config)
}

/// Loads tensors into a model built from `config` rather than the stored
/// one; a shape mismatch names the offending tensor.
pub fn from_bytes_with_config(bytes: &[u8], config: &ModelConfig) -> Result<Model> {
    let (manifest, values) = read_manifest(bytes)?;
    restore(manifest, &values, config)
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_with_config(path: &Path, config: &ModelConfig) -> Result<Model> {
    from_bytes_with_config(&fs::read(path).map_err(|e| Error::io(path, e))?, config)
}
