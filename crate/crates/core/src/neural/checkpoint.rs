//! Self-describing fine-tuned checkpoints: the trainable tensors and
//! buffers in safetensors, with the model and training configuration,
//! seed and source revision in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, SegModel};
use super::train::{TrainConfig, TrainHistory};
use crate::error::{Error, Result};

const META_KEY: &str = "rockseg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub train: Option<TrainConfig>,
    pub history: Option<TrainHistory>,
    pub seed: u64,
    pub git_hash: String,
    pub crate_version: String,
    /// Checksum of the frozen weights the adapters were trained against.
    pub backbone_checksum: String,
}

/// Current source revision, or "unknown" outside a git checkout.
pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn save_checkpoint(
    model: &SegModel,
    path: &Path,
    seed: u64,
    train: Option<&TrainConfig>,
    history: Option<&TrainHistory>,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        model: model.spec().clone(),
        train: train.cloned(),
        history: history.cloned(),
        seed,
        git_hash: git_hash(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        backbone_checksum: model.backbone_checksum()?,
    };
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    let state = model.params.state();
    let tensors: Vec<(String, candle_core::Tensor)> = state
        .into_iter()
        .map(|(k, v)| Ok((k, v.contiguous()?)))
        .collect::<Result<_>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors, Some(info), path)?;
    Ok(meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format(format!("{} has no rockseg metadata", path.display())))?;
    Ok(serde_json::from_str(json)?)
}

/// Rebuilds the model (loading backbone weights as its spec requires) and
/// restores the saved tensors. Fails if the frozen weights differ from the
/// ones the checkpoint was trained against.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(SegModel, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let model = SegModel::build(&meta.model, meta.seed, device)?;
    let state = candle_core::safetensors::load(path, device)?;
    let expected = model.params.trainable.len() + model.params.buffers.len();
    let n = model.params.restore(&state)?;
    if n != expected {
        return Err(Error::Format(format!("checkpoint restored {n} of {expected} tensors")));
    }
    if model.backbone_checksum()? != meta.backbone_checksum {
        return Err(Error::Format("backbone weights differ from the ones used in training".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::heads::{HeadKind, HeadSpec};
    use crate::neural::lora::LoraConfig;
    use crate::neural::params::Ctx;
    use crate::neural::vit::{BackboneSpec, VitConfig};
    use candle_core::{DType, Tensor};

    #[test]
    fn round_trip_restores_outputs() {
        let mut head = HeadSpec::new(HeadKind::Conv, 3);
        head.out_size = 14;
        head.conv_channels = vec![4, 4, 4, 4];
        let spec = ModelSpec::Vit {
            backbone: BackboneSpec::stub(VitConfig::stub(8, 2, 2), 2),
            head,
            lora: Some(LoraConfig {
                rank: 2,
                ..Default::default()
            }),
            quant: None,
        };
        let m = SegModel::build(&spec, 5, &Device::Cpu).unwrap();
        // perturb every trainable tensor so restore is observable
        for v in m.params.trainable.values() {
            v.set(&(v.as_tensor() + 0.25).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.safetensors");
        save_checkpoint(&m, &p, 5, Some(&TrainConfig::default()), None).unwrap();
        let (m2, meta) = load_checkpoint(&p, &Device::Cpu).unwrap();
        assert_eq!(meta.model, spec);
        let x = Tensor::ones((1, 1, 14, 14), DType::F32, &Device::Cpu).unwrap();
        let a: Vec<f32> = m.forward(&x, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m2.forward(&x, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
