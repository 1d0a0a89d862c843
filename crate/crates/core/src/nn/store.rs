//! Weight directory: `manifest.json` plus a little-endian float32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ModelConfig, ModelWeights, Unet};
use super::{NnError, Tensor};

pub const WEIGHTS_MANIFEST: &str = "manifest.json";
pub const WEIGHTS_BLOB: &str = "weights.bin";
pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Start of this parameter in the blob, in float32 elements.
    pub offset: usize,
    pub numel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub schema_version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub config: ModelConfig,
    pub total_elements: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save_weights(w: &ModelWeights, dir: &Path) -> Result<(), NnError> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(w.params.len());
    let mut blob = Vec::with_capacity(w.num_parameters() * 4);
    let mut offset = 0;
    for (name, t) in &w.params {
        params.push(ParamEntry { name: name.clone(), shape: t.shape.clone(), offset, numel: t.numel() });
        offset += t.numel();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightsManifest {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        dtype: "float32".into(),
        byte_order: "little".into(),
        config: w.config.clone(),
        total_elements: offset,
        params,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NnError::Weights(e.to_string()))?;
    fs::write(dir.join(WEIGHTS_MANIFEST), json)?;
    fs::write(dir.join(WEIGHTS_BLOB), blob)?;
    Ok(())
}

pub fn load_weights(dir: &Path) -> Result<ModelWeights, NnError> {
    let mpath = dir.join(WEIGHTS_MANIFEST);
    if !mpath.is_file() {
        return Err(NnError::ManifestNotFound(mpath.display().to_string()));
    }
    let manifest: WeightsManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| NnError::Weights(format!("{}: {e}", mpath.display())))?;
    if manifest.schema_version != WEIGHTS_SCHEMA_VERSION {
        return Err(NnError::Weights(format!("unsupported schema_version {}", manifest.schema_version)));
    }
    if manifest.dtype != "float32" || manifest.byte_order != "little" {
        return Err(NnError::Weights(format!(
            "unsupported encoding {} / {}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let blob = fs::read(dir.join(WEIGHTS_BLOB))?;
    if blob.len() != manifest.total_elements * 4 {
        return Err(NnError::Weights(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.total_elements * 4
        )));
    }
    let mut params = BTreeMap::new();
    for e in &manifest.params {
        if e.shape.iter().product::<usize>() != e.numel || e.offset + e.numel > manifest.total_elements {
            return Err(NnError::Weights(format!("inconsistent entry for '{}'", e.name)));
        }
        let bytes = &blob[e.offset * 4..(e.offset + e.numel) * 4];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)).is_some() {
            return Err(NnError::Weights(format!("duplicate parameter '{}'", e.name)));
        }
    }
    Ok(ModelWeights { config: manifest.config, params })
}

/// Loads weights and checks them against the model built from `cfg`.
pub fn load_weights_for(dir: &Path, cfg: &ModelConfig) -> Result<ModelWeights, NnError> {
    let mut w = load_weights(dir)?;
    let net = Unet::new(cfg.clone())?;
    net.check_weights(&w)?;
    w.config = cfg.clone();
    Ok(w)
}
