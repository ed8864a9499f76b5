use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParamStore;
use crate::tensor::Tensor;

const FORMAT: &str = "hstfl-params-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format `{0}` is not supported")]
    Format(String),
    #[error("parameter `{name}`: {msg}")]
    Entry { name: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the parameter file.
    pub offset: usize,
}

/// JSON index of a flat little-endian `f64` parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
    /// Free-form record of how the parameters were produced.
    pub config: serde_json::Value,
}

/// Writes `manifest.json` and `params.bin` into `dir`, prefixing every name
/// with its group (e.g. the owning party).
pub fn save_checkpoint(
    dir: &Path,
    groups: &[(&str, &ParamStore)],
    config: serde_json::Value,
) -> Result<Manifest, CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            entries.push(ManifestEntry {
                name: format!("{prefix}/{name}"),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        entries,
        config,
    };
    std::fs::write(dir.join(PARAMS_FILE), bytes)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint directory into its manifest and named tensors.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>), CheckpointError> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format(manifest.format));
    }
    let bytes = std::fs::read(dir.join(PARAMS_FILE))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        let err = |msg: &str| CheckpointError::Entry {
            name: e.name.clone(),
            msg: msg.to_string(),
        };
        let raw = bytes.get(e.offset..end).ok_or_else(|| err("extends past end of file"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|x| err(&x.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok((manifest, out))
}

impl ParamStore {
    /// Overwrites every parameter from `entries` named `{prefix}/{name}`.
    pub fn restore(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        for id in self.ids().collect::<Vec<_>>() {
            let full = format!("{prefix}/{}", self.name(id));
            let t = entries
                .iter()
                .find(|(n, _)| *n == full)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::Entry {
                    name: full.clone(),
                    msg: "missing from checkpoint".into(),
                })?;
            if t.shape() != self.get(id).shape() {
                return Err(CheckpointError::Entry {
                    name: full,
                    msg: format!("shape {:?} != expected {:?}", t.shape(), self.get(id).shape()),
                });
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
