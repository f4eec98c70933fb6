//! Linear probing: a per-pixel affine classifier trained on frozen feature maps.

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{HeadKind, HeadSpec, LinearHead};
use super::ops::{argmax_labels, cross_entropy, masks_to_tensor, resize_bilinear};
use super::params::{Builder, ParamSet};
use crate::error::{Error, Result};
use crate::types::{ClassPalette, FeatureMap, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 15,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

pub struct LinearProbe {
    head: LinearHead,
    pub params: ParamSet,
    palette: std::sync::Arc<ClassPalette>,
    device: Device,
}

fn features_to_tensor(fs: &[&FeatureMap], dev: &Device) -> Result<Tensor> {
    let (h, w, c) = fs[0].dim();
    let mut v: Vec<f32> = Vec::with_capacity(fs.len() * h * w * c);
    for f in fs {
        if f.dim() != (h, w, c) {
            return Err(Error::shape(format!("{h}x{w}x{c}"), format!("{:?}", f.dim())));
        }
        v.extend(f.values().iter());
    }
    Ok(Tensor::from_vec(v, (fs.len(), h, w, c), dev)?.permute((0, 3, 1, 2))?.contiguous()?)
}

impl LinearProbe {
    /// Trains on feature maps paired with masks; logits are bilinearly
    /// upsampled to the mask resolution before the pixelwise loss.
    pub fn fit(features: &[FeatureMap], masks: &[LabelMask], cfg: &LinearProbeConfig) -> Result<Self> {
        if features.is_empty() || features.len() != masks.len() {
            return Err(Error::shape(format!("{} masks", features.len()), masks.len()));
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
        }
        let dev = Device::Cpu;
        let palette = masks[0].palette_arc();
        let (mh, mw) = masks[0].dim();
        let mut spec = HeadSpec::new(HeadKind::Linear, palette.len());
        spec.out_size = mh;
        let mut b = Builder::new(cfg.seed, &dev, DType::F32);
        let head = LinearHead::new(&mut b, "head", features[0].channels(), &spec)?;
        let params = b.params;
        let mut opt = AdamW::new(
            params.vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let mut order: Vec<usize> = (0..features.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let fs: Vec<&FeatureMap> = chunk.iter().map(|&i| &features[i]).collect();
                let ms: Vec<&LabelMask> = chunk.iter().map(|&i| &masks[i]).collect();
                let x = features_to_tensor(&fs, &dev)?;
                let y = masks_to_tensor(&ms, &dev)?;
                let logits = resize_bilinear(&head.project(&x)?, mh, mw)?;
                let loss = cross_entropy(&logits, &y, None)?;
                let l: f32 = loss.to_scalar()?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: 0,
                        diagnostics: format!("linear probe loss {l}"),
                    });
                }
                opt.backward_step(&loss)?;
            }
        }
        Ok(Self {
            head,
            params,
            palette,
            device: dev,
        })
    }

    pub fn predict(&self, f: &FeatureMap, out_h: usize, out_w: usize) -> Result<LabelMask> {
        let x = features_to_tensor(&[f], &self.device)?;
        let logits = resize_bilinear(&self.head.project(&x)?, out_h, out_w)?;
        let l = argmax_labels(&logits)?.pop().expect("one map");
        LabelMask::new(l, self.palette.clone())
    }
}
