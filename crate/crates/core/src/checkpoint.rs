//! Checkpoint container: a JSON manifest next to a flat little-endian f32
//! payload.
//!
//! The manifest lists every tensor with its name, shape and byte offset,
//! echoes the model and training configuration, and records seed and
//! epoch. Writing a loaded checkpoint reproduces both files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::Tensor;
use crate::training::TrainConfig;

pub const FORMAT: &str = "dgp-rtn-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub epoch: usize,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub payload_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    fn check(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        let mut expected = 0;
        for t in &self.tensors {
            if t.offset != expected {
                return Err(Error::Format(format!("tensor {} starts at byte {}, expected {expected}", t.name, t.offset)));
            }
            expected += 4 * t.shape.iter().product::<usize>();
        }
        if expected != self.payload_bytes {
            return Err(Error::Format(format!(
                "tensors cover {expected} bytes but the manifest declares {}",
                self.payload_bytes
            )));
        }
        Ok(())
    }
}

/// Payload path used for a manifest path: same stem, `.bin` extension.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `model` to `manifest` (JSON) and its sibling `.bin` payload.
pub fn save(path: &Path, model: &Model, train: Option<&TrainConfig>, seed: u64, epoch: usize) -> Result<Manifest> {
    let payload = payload_path(path);
    let payload_name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Contract(format!("checkpoint path {} has no file name", path.display())))?
        .to_owned();
    let mut bytes = Vec::with_capacity(4 * model.store.scalar_count());
    let mut tensors = Vec::with_capacity(model.store.len());
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.config.clone(),
        train: train.cloned(),
        seed,
        epoch,
        payload: payload_name,
        payload_bytes: bytes.len(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&payload, &bytes).map_err(|e| Error::io(&payload, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.check()?;
    Ok(manifest)
}

/// Rebuilds the model described by a manifest and fills in its weights.
pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(path)?;
    let payload = path.with_file_name(&manifest.payload);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    if bytes.len() != manifest.payload_bytes {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest declares {}",
            payload.display(),
            bytes.len(),
            manifest.payload_bytes
        )));
    }
    let named = manifest
        .tensors
        .iter()
        .map(|t| {
            let n: usize = t.shape.iter().product();
            let data = bytes[t.offset..t.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok((t.name.clone(), Tensor::new(t.shape.clone(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(manifest.model.clone(), manifest.seed)?;
    model
        .store
        .load(named)
        .map_err(|e| Error::Format(format!("{} does not match its model config: {e}", path.display())))?;
    Ok((model, manifest))
}
