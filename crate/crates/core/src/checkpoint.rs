//! Model checkpoints in the shared container format.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::unet::{DenoiserModel, TrainablePolicy, UnetConfig};

const CHECKPOINT_MAGIC: &[u8; 8] = b"BDIFCKPT";

/// What a checkpoint was trained as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// `forward`, `backward` or `backward_wo_ra`.
    pub role: String,
    pub policy: TrainablePolicy,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: UnetConfig,
    architecture_hash: String,
    info: CheckpointInfo,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &DenoiserModel, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format: "bidiff-checkpoint".into(),
        config: model.config().clone(),
        architecture_hash: model.architecture_hash(),
        info: info.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let count = model.params.num_elements();
    let payload = model.params.iter().flat_map(|(_, p)| p.value.iter().copied());
    container::write(path, CHECKPOINT_MAGIC, &manifest, payload, count)
}

/// Loads a checkpoint, rebuilding the architecture from its stored config and
/// refusing files whose parameters do not match it.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, CheckpointInfo)> {
    let (m, values): (CheckpointManifest, Vec<f32>) = container::read(path, CHECKPOINT_MAGIC)?;
    let mut model = DenoiserModel::new(m.config, 0).map_err(|e| Error::corrupt(path, e.to_string()))?;
    if model.architecture_hash() != m.architecture_hash {
        return Err(Error::corrupt(path, "architecture hash mismatch"));
    }
    if m.params.len() != model.params.len() {
        return Err(Error::corrupt(path, "parameter count mismatch"));
    }
    let mut at = 0;
    for entry in &m.params {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| Error::corrupt(path, format!("unknown parameter {}", entry.name)))?;
        if model.params.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::corrupt(path, format!("shape mismatch for {}", entry.name)));
        }
        let len: usize = entry.shape.iter().product();
        let chunk = values
            .get(at..at + len)
            .ok_or_else(|| Error::corrupt(path, "payload too short"))?;
        *model.params.get_mut(id) = ArrayD::from_shape_vec(IxDyn(&entry.shape), chunk.to_vec()).expect("length checked");
        at += len;
    }
    if at != values.len() {
        return Err(Error::corrupt(path, "payload length disagrees with parameters"));
    }
    model.set_trainable(m.info.policy);
    Ok((model, m.info))
}
