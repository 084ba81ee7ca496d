//! Checkpoint container: a JSON manifest next to a raw little-endian `f64`
//! payload file. Round-trips are bit-exact.
//!
//! The manifest path is the checkpoint path; the payload lives beside it
//! with a `.bin` suffix and is referenced by file name.

use std::fs;
use std::path::{Path, PathBuf};

use distillkit_core::encoder::{EncoderConfig, ModelState};
use distillkit_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{IoError, Result};

const FORMAT_TAG: &str = "distillkit-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload file.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    payload: String,
    config: EncoderConfig,
    /// "token", "sequence", or absent when no head is attached.
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    params: Vec<ParamEntry>,
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(payload)
}

/// Write `state` as `<path>` (JSON manifest) plus `<path>.bin` (raw
/// little-endian doubles).
pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let payload_name = format!(
        "{}.bin",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    );
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    state.params.visit(&mut |name, tensor: &Tensor| {
        entries.push(ParamEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
            len: tensor.numel(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let task = match (&state.params.token_head, &state.params.seq_head) {
        (Some(_), _) => Some("token".to_string()),
        (_, Some(_)) => Some("sequence".to_string()),
        _ => None,
    };
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        dtype: "f64".to_string(),
        payload: payload_name.clone(),
        config: state.config.clone(),
        task,
        labels: state.task_labels.clone(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| IoError::file(path.display().to_string(), e))?;
    let bin_path = payload_path(path, &payload_name);
    fs::write(&bin_path, payload).map_err(|e| IoError::file(bin_path.display().to_string(), e))?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text =
        fs::read_to_string(path).map_err(|e| IoError::file(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(IoError::format(
            path.display().to_string(),
            format!("unsupported checkpoint format {:?}", manifest.format),
        ));
    }
    if manifest.dtype != "f64" {
        return Err(IoError::format(
            path.display().to_string(),
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let bin_path = payload_path(path, &manifest.payload);
    let payload =
        fs::read(&bin_path).map_err(|e| IoError::file(bin_path.display().to_string(), e))?;

    let mut state = ModelState::init(&manifest.config, 0).map_err(IoError::Core)?;
    if let Some(labels) = &manifest.labels {
        match manifest.task.as_deref() {
            Some("token") => state.attach_token_head(labels.clone(), 0),
            Some("sequence") => state.attach_seq_head(labels.clone(), 0),
            _ => {}
        }
    }

    let mut by_name: std::collections::BTreeMap<&str, &ParamEntry> = Default::default();
    for e in &manifest.params {
        by_name.insert(e.name.as_str(), e);
    }
    let mut missing: Vec<String> = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    state.params.visit_mut(&mut |name, tensor: &mut Tensor| {
        let Some(entry) = by_name.remove(name.as_str()) else {
            missing.push(name);
            return;
        };
        if entry.shape != tensor.shape() || entry.len != tensor.numel() {
            bad.push(format!("{name}: manifest shape {:?}", entry.shape));
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 8;
        if end > payload.len() {
            bad.push(format!("{name}: payload out of range"));
            return;
        }
        let mut values = Vec::with_capacity(entry.len);
        for chunk in payload[start..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        *tensor = Tensor::new(&entry.shape, values).unwrap();
    });
    if let Some(name) = missing.first() {
        return Err(IoError::format(
            path.display().to_string(),
            format!("missing parameter {name}"),
        ));
    }
    if let Some(msg) = bad.first() {
        return Err(IoError::format(path.display().to_string(), msg.clone()));
    }
    if let Some((extra, _)) = by_name.first_key_value() {
        return Err(IoError::format(
            path.display().to_string(),
            format!("unexpected parameter {extra}"),
        ));
    }
    Ok(state)
}
