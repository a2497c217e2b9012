//! Checkpoint files.
//!
//! Layout (little-endian): magic `ASRM`, `u32` format version, `u32` header
//! length, a JSON header `{version, config, params: [{name, shape, offset}]}`,
//! then every parameter as `f32` values at its byte offset from the end of
//! the header.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::lexicon::SememeLexicon;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ASRM";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

/// Human-readable list of fields that differ between two configs.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serialises");
    let b = serde_json::to_value(found).expect("config serialises");
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: expected {v}, found {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
        .collect()
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut params = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (_, p) in self.params.iter() {
            params.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 4 * p.value.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds a model from checkpoint bytes. With `expected`, a differing
    /// stored config is rejected with a field-by-field diff.
    pub fn from_checkpoint_bytes(
        bytes: &[u8],
        expected: Option<&ModelConfig>,
        lexicon: SememeLexicon,
    ) -> Result<Model> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 12 {
            return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + hlen;
        if bytes.len() < payload_start {
            return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| fmt(12, format!("bad header: {e}")))?;
        if header.version != version {
            return Err(fmt(12, "header version disagrees with preamble".into()));
        }
        if let Some(exp) = expected {
            let diff = config_diff(exp, &header.config);
            if !diff.is_empty() {
                return Err(Error::config(format!(
                    "checkpoint config mismatch: {}",
                    diff.join("; ")
                )));
            }
        }
        let mut model = Model::new(header.config, lexicon, 0)?;
        if header.params.len() != model.params.len() {
            return Err(fmt(
                12,
                format!(
                    "checkpoint has {} parameters, config implies {}",
                    header.params.len(),
                    model.params.len()
                ),
            ));
        }
        let payload = &bytes[payload_start..];
        let mut expected_len = 0usize;
        for entry in &header.params {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| fmt(12, format!("unknown parameter {}", entry.name)))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != entry.shape.as_slice() {
                return Err(fmt(
                    12,
                    format!("parameter {} has shape {:?}, expected {:?}", entry.name, entry.shape, p.value.shape()),
                ));
            }
            let start = entry.offset as usize;
            let end = start + 4 * p.value.len();
            if end > payload.len() {
                return Err(fmt(payload_start + payload.len(), format!("payload truncated in {}", entry.name)));
            }
            for (dst, c) in p.value.data_mut().iter_mut().zip(payload[start..end].chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            expected_len = expected_len.max(end);
        }
        if payload.len() != expected_len {
            return Err(fmt(payload_start + expected_len, "trailing bytes after payload".into()));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes())?;
    Ok(())
}

/// Loads a checkpoint; I/O and format problems are reported against `path`.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>, lexicon: SememeLexicon) -> Result<Model> {
    let load_err = |msg: String| Error::Load {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(|e| load_err(e.to_string()))?;
    Model::from_checkpoint_bytes(&bytes, expected, lexicon).map_err(|e| match e {
        Error::Config(_) => e,
        other => load_err(other.to_string()),
    })
}
