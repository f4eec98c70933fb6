//! Fine-tuning loop: AdamW, cosine decay, best-IoU model selection.

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cnn::UnetSize;
use super::model::{ModelSpec, SegModel};
use super::ops::{cross_entropy, masks_to_tensor, slices_to_tensor};
use super::params::Ctx;
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, ConfusionMatrix};
use crate::preprocess::augment::{augment, AugmentConfig};
use crate::types::{GraySlice, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Per-step cosine decay from `lr` to 0, no warmup.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Uses only the first `n` training pairs when set.
    pub n_train_images: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub schedule: LrSchedule,
    /// Inverse-frequency class weights in the cross-entropy.
    pub class_weights: bool,
    /// Training-time augmentation; `None` feeds slices unchanged. Validation
    /// uses the matching center-crop transform.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 15,
            n_train_images: None,
            optimizer: OptimizerSpec::default(),
            schedule: LrSchedule::Cosine,
            class_weights: false,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults, with the smaller batch the large UNet needs.
    pub fn for_model(spec: &ModelSpec) -> Self {
        let mut c = Self::default();
        if matches!(spec, ModelSpec::Unet { size: UnetSize::Large, .. }) {
            c.batch_size = 8;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be finite and >= 0".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    pub lr_end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (highest held-out IoU).
    pub best_epoch: Option<usize>,
    pub best_iou: Option<f64>,
}

/// Inverse class frequencies normalized to mean 1 over present classes;
/// absent classes get weight 1.
pub fn class_weights(masks: &[&LabelMask], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n_classes];
    for m in masks {
        for &l in m.labels() {
            if (l as usize) < n_classes {
                counts[l as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                total as f64 / (present as f64 * c as f64)
            }
        })
        .collect()
}

fn transform(
    pairs: &[(GraySlice, LabelMask)],
    idx: &[usize],
    aug: Option<&AugmentConfig>,
) -> Result<Vec<(GraySlice, LabelMask)>> {
    idx.par_iter()
        .map(|&i| {
            let (s, m) = &pairs[i];
            match aug {
                Some(a) => {
                    let (s, m) = augment(s, Some(m), a)?;
                    Ok((s, m.expect("mask in, mask out")))
                }
                None => Ok((s.clone(), m.clone())),
            }
        })
        .collect()
}

/// Held-out confusion under the evaluation transform.
pub fn evaluate_model(
    model: &SegModel,
    pairs: &[(GraySlice, LabelMask)],
    eval_aug: Option<&AugmentConfig>,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let n = model.n_classes();
    let mut cm = ConfusionMatrix::zeros(n);
    let all: Vec<usize> = (0..pairs.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = transform(pairs, chunk, eval_aug)?;
        let slices: Vec<&GraySlice> = batch.iter().map(|p| &p.0).collect();
        let preds = model.predict(&slices, batch[0].1.palette())?;
        for (p, (_, gt)) in preds.iter().zip(&batch) {
            cm.merge(&confusion_matrix(p, gt)?)?;
        }
    }
    Ok(cm)
}

/// Trains the model's trainable tensors in place. Returns the per-epoch
/// history; the weights of the best held-out epoch are restored at the end.
pub fn train_segmenter(
    model: &mut SegModel,
    train: &[(GraySlice, LabelMask)],
    val: &[(GraySlice, LabelMask)],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let train = match cfg.n_train_images {
        Some(n) if n > train.len() => {
            return Err(Error::invalid(format!("n_train_images {n} exceeds {} training pairs", train.len())))
        }
        Some(n) => &train[..n],
        None => train,
    };
    if train.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let palette = train[0].1.palette_arc();
    if palette.len() != model.n_classes() {
        return Err(Error::shape(format!("{} classes", model.n_classes()), palette.len()));
    }
    if let Some((_, m)) = train.iter().chain(val).find(|(_, m)| m.palette() != palette.as_ref()) {
        return Err(Error::invalid(format!("inconsistent palette: {:?} vs {:?}", m.palette().names(), palette.names())));
    }

    let weights = cfg.class_weights.then(|| {
        let masks: Vec<&LabelMask> = train.iter().map(|p| &p.1).collect();
        class_weights(&masks, model.n_classes())
    });
    let eval_aug = cfg.augment.as_ref().map(|a| AugmentConfig::eval(a.crop.size, a.upsample));
    let o = &cfg.optimizer;
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut history = TrainHistory::default();
    let mut best = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let aug = cfg.augment.as_ref().map(|a| AugmentConfig {
            seed: a.seed.wrapping_add(cfg.seed).wrapping_add(epoch as u64),
            ..a.clone()
        });
        let ctx = Ctx::train(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = o.lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cfg.schedule.lr_at(o.lr, step, total);
            opt.set_learning_rate(lr);
            let batch = transform(train, chunk, aug.as_ref())?;
            let slices: Vec<&GraySlice> = batch.iter().map(|p| &p.0).collect();
            let masks: Vec<&LabelMask> = batch.iter().map(|p| &p.1).collect();
            let x = slices_to_tensor(&slices, model.dtype(), model.device())?;
            let y = masks_to_tensor(&masks, model.device())?;
            let logits = model.forward(&x, &ctx)?;
            let loss = cross_entropy(&logits, &y, weights.as_deref())?;
            let l: f64 = loss.to_dtype(candle_core::DType::F64)?.to_scalar()?;
            if !l.is_finite() {
                let lmax: f64 = logits.abs()?.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
                return Err(Error::Diverged {
                    epoch,
                    step,
                    diagnostics: format!("loss {l}, max |logit| {lmax}, lr {lr:.3e}, batch {:?}", chunk),
                });
            }
            if !model.params.trainable.is_empty() {
                opt.backward_step(&loss)?;
            }
            loss_sum += l * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_iou = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(model, val, eval_aug.as_ref(), cfg.batch_size)?.mean_iou())
        };
        log::info!(
            "epoch {}/{} loss {train_loss:.4} val IoU {}",
            epoch + 1,
            cfg.epochs,
            val_iou.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some(v) = val_iou {
            if history.best_iou.is_none_or(|b| v > b) {
                history.best_iou = Some(v);
                history.best_epoch = Some(epoch);
                best = Some(model.params.snapshot()?);
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_iou,
            lr_end: lr,
        });
    }
    match best {
        Some(state) => {
            model.params.restore(&state)?;
        }
        None => history.best_epoch = Some(cfg.epochs - 1),
    }
    Ok(history)
}

/// Scalar loss of one batch, for gradient checks and diagnostics.
pub fn batch_loss(model: &SegModel, x: &Tensor, y: &Tensor, ctx: &Ctx, weights: Option<&[f64]>) -> Result<Tensor> {
    cross_entropy(&model.forward(x, ctx)?, y, weights)
}
