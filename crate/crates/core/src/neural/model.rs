//! End-to-end segmentation models: backbone + head, or a baseline network.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::cnn::{ResNet, Unet, UnetSize, RESNET_OUT_DIM};
use super::heads::{Head, HeadSpec};
use super::lora::LoraConfig;
use super::ops::{argmax_labels, slices_to_tensor};
use super::params::{Builder, Ctx, ParamSet};
use super::quant::QuantConfig;
use super::vit::{cache_dir, load_weights, verify_sha256, BackboneSpec, CheckpointRef, Vit};
use crate::error::{Error, Result};
use crate::types::{ClassPalette, GraySlice, LabelMask};

pub const RESNET_FILE: &str = "resnet152.safetensors";
pub const RESNET_URL: &str = "https://download.pytorch.org/models/resnet152-394f9c45.pth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Transformer backbone with a segmentation head. Without `lora` the
    /// backbone is frozen and only the head trains.
    Vit {
        backbone: BackboneSpec,
        head: HeadSpec,
        #[serde(default)]
        lora: Option<LoraConfig>,
        #[serde(default)]
        quant: Option<QuantConfig>,
    },
    Unet { size: UnetSize, n_classes: usize },
    ResnetConvHead {
        head: HeadSpec,
        #[serde(default)]
        lora: Option<LoraConfig>,
        #[serde(default)]
        quant: Option<QuantConfig>,
        #[serde(default)]
        checkpoint: Option<CheckpointRef>,
        /// Skip the pretrained weights (tests and parameter accounting).
        #[serde(default)]
        random_init: bool,
    },
}

impl ModelSpec {
    pub fn n_classes(&self) -> usize {
        match self {
            ModelSpec::Vit { head, .. } | ModelSpec::ResnetConvHead { head, .. } => head.n_classes,
            ModelSpec::Unet { n_classes, .. } => *n_classes,
        }
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        let ft = |l: &Option<LoraConfig>| if l.is_some() { "ft" } else { "frozen" };
        match self {
            ModelSpec::Vit { backbone, head, lora, .. } => format!(
                "dinov2-{}-{}-{}",
                backbone.size.name(),
                serde_json::to_value(head.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                ft(lora)
            ),
            ModelSpec::Unet { size, .. } => match size {
                UnetSize::Small => "unet-small".into(),
                UnetSize::Large => "unet-large".into(),
            },
            ModelSpec::ResnetConvHead { lora, .. } => format!("resnet152-conv-{}", ft(lora)),
        }
    }

    /// Square input side the model is trained on.
    pub fn input_size(&self) -> usize {
        match self {
            ModelSpec::Vit { head, .. } | ModelSpec::ResnetConvHead { head, .. } => head.out_size,
            ModelSpec::Unet { .. } => 560,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Vit { backbone, head, lora, quant } => {
                backbone.validate()?;
                head.validate()?;
                if head.out_size % super::vit::PATCH != 0 {
                    return Err(Error::Config(format!("out_size {} not divisible by 14", head.out_size)));
                }
                lora.as_ref().map(|l| l.validate()).transpose()?;
                quant.as_ref().map(|q| q.validate()).transpose()?;
            }
            ModelSpec::Unet { n_classes, .. } => {
                if *n_classes < 2 {
                    return Err(Error::Config("UNet needs at least 2 classes".into()));
                }
            }
            ModelSpec::ResnetConvHead { head, lora, quant, .. } => {
                head.validate()?;
                lora.as_ref().map(|l| l.validate()).transpose()?;
                quant.as_ref().map(|q| q.validate()).transpose()?;
            }
        }
        Ok(())
    }

    /// Path of the pretrained weights this spec needs, or `None` for random init.
    pub fn checkpoint_path(&self) -> Result<Option<PathBuf>> {
        match self {
            ModelSpec::Vit { backbone, .. } if backbone.custom.is_none() => Ok(Some(backbone.checkpoint_path()?)),
            ModelSpec::ResnetConvHead {
                checkpoint,
                random_init: false,
                ..
            } => {
                let path = checkpoint
                    .as_ref()
                    .and_then(|c| c.path.clone())
                    .unwrap_or_else(|| cache_dir().join(RESNET_FILE));
                if !path.is_file() {
                    let url = checkpoint.as_ref().and_then(|c| c.url.clone()).unwrap_or_else(|| RESNET_URL.into());
                    return Err(Error::MissingCheckpoint {
                        hint: format!(
                            "download {url}, convert the state dict to safetensors and save it as {}",
                            path.display()
                        ),
                        path,
                    });
                }
                if let Some(h) = checkpoint.as_ref().and_then(|c| c.sha256.as_ref()) {
                    verify_sha256(&path, h)?;
                }
                Ok(Some(path))
            }
            _ => Ok(None),
        }
    }
}

enum Net {
    Vit { vit: Vit, head: Head },
    Unet(Unet),
    Resnet { enc: ResNet, head: Head },
}

pub struct SegModel {
    spec: ModelSpec,
    net: Net,
    pub params: ParamSet,
    device: Device,
    dtype: DType,
}

impl SegModel {
    /// Builds the model, loading pretrained backbone weights when the spec needs them.
    pub fn build(spec: &ModelSpec, seed: u64, device: &Device) -> Result<Self> {
        let weights = match spec.checkpoint_path()? {
            Some(p) => Some(load_weights(&p, device)?),
            None => None,
        };
        Self::build_with(spec, seed, device, DType::F32, weights.as_ref())
    }

    pub fn build_with(
        spec: &ModelSpec,
        seed: u64,
        device: &Device,
        dtype: DType,
        weights: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::new(seed, device, dtype);
        if let Some(w) = weights {
            b = b.with_weights(w);
        }
        let net = match spec {
            ModelSpec::Vit { backbone, head, lora, quant } => {
                let quant = quant.as_ref().filter(|q| q.enabled);
                let vit = Vit::new(&mut b, backbone, lora.as_ref(), quant)?;
                let head = Head::new(&mut b, "head", backbone.concat_dim(), head)?;
                Net::Vit { vit, head }
            }
            ModelSpec::Unet { size, n_classes } => Net::Unet(Unet::new(&mut b, *size, *n_classes)?),
            ModelSpec::ResnetConvHead { head, lora, quant, .. } => {
                let quant = quant.as_ref().filter(|q| q.enabled);
                let enc = ResNet::resnet152(&mut b, lora.as_ref(), quant)?;
                let head = Head::new(&mut b, "head", RESNET_OUT_DIM, head)?;
                Net::Resnet { enc, head }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            net,
            params: b.params,
            device: device.clone(),
            dtype,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn n_trainable(&self) -> usize {
        self.params.n_trainable()
    }

    /// Checksum of every frozen (backbone) weight.
    pub fn backbone_checksum(&self) -> Result<String> {
        self.params.frozen_checksum()
    }

    /// `(B, 1, H, W)` intensities to `(B, n_classes, H', W')` logits.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match &self.net {
            Net::Vit { vit, head } => head.forward(&vit.forward(x, ctx)?.patches, ctx),
            Net::Unet(u) => u.forward(x, ctx),
            Net::Resnet { enc, head } => head.forward(&enc.forward(x, ctx)?, ctx),
        }
    }

    /// Eval-mode label maps for a batch of equally sized slices.
    pub fn predict(&self, slices: &[&GraySlice], palette: &ClassPalette) -> Result<Vec<LabelMask>> {
        let x = slices_to_tensor(slices, self.dtype, &self.device)?;
        let logits = self.forward(&x, &Ctx::eval())?;
        let pal = std::sync::Arc::new(palette.clone());
        argmax_labels(&logits)?
            .into_iter()
            .map(|l| LabelMask::new(l, pal.clone()))
            .collect()
    }
}
