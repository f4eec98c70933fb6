//! Training-time augmentation: crop, bilinear upsample, flips and
//! photometric jitter.
//!
//! Geometric operations hit the slice and its mask identically; the mask is
//! resampled nearest-neighbour so no new class index can appear. Jitter only
//! touches intensities. Every slice draws from its own generator, seeded from
//! the config seed and the slice identity, so results do not depend on the
//! order in which a batch is processed.

use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::{resize_bilinear, resize_nearest};
use crate::error::{Error, Result};
use crate::types::{GraySlice, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub mode: CropMode,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipConfig {
    pub horizontal: f64,
    pub vertical: f64,
}

/// Multiplicative ranges `[lo, hi]`; `[1, 1]` disables a jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    pub gamma: [f64; 2],
}

impl JitterConfig {
    pub const NONE: JitterConfig = JitterConfig {
        contrast: [1.0, 1.0],
        brightness: [1.0, 1.0],
        gamma: [1.0, 1.0],
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop: CropConfig,
    pub upsample: usize,
    pub flip: FlipConfig,
    pub jitter: JitterConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig {
                mode: CropMode::Random,
                size: 224,
            },
            upsample: 560,
            flip: FlipConfig {
                horizontal: 0.5,
                vertical: 0.5,
            },
            jitter: JitterConfig {
                contrast: [0.9, 1.1],
                brightness: [0.9, 1.1],
                gamma: [0.9, 1.1],
            },
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Center crop and upsample only; the evaluation-time transform.
    pub fn eval(crop: usize, upsample: usize) -> Self {
        Self {
            crop: CropConfig {
                mode: CropMode::Center,
                size: crop,
            },
            upsample,
            flip: FlipConfig {
                horizontal: 0.0,
                vertical: 0.0,
            },
            jitter: JitterConfig::NONE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop.size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if self.upsample < self.crop.size {
            return Err(Error::Config(format!(
                "upsample size {} smaller than crop size {}",
                self.upsample, self.crop.size
            )));
        }
        for p in [self.flip.horizontal, self.flip.vertical] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("flip probability {p} outside [0, 1]")));
            }
        }
        for r in [self.jitter.contrast, self.jitter.brightness, self.jitter.gamma] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("invalid jitter range {r:?}")));
            }
        }
        Ok(())
    }

    fn rng_for(&self, slice: &GraySlice) -> ChaCha8Rng {
        // FNV-style mix: stable across platforms and runs
        let mut h = StableHasher::default();
        self.seed.hash(&mut h);
        slice.sample_id.hash(&mut h);
        slice.slice_index.hash(&mut h);
        ChaCha8Rng::seed_from_u64(h.finish())
    }
}

#[derive(Default)]
struct StableHasher(u64);

impl Hasher for StableHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        let mut h = if self.0 == 0 { 0xcbf2_9ce4_8422_2325 } else { self.0 };
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.0 = h;
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

pub fn augment(
    slice: &GraySlice,
    mask: Option<&LabelMask>,
    cfg: &AugmentConfig,
) -> Result<(GraySlice, Option<LabelMask>)> {
    cfg.validate()?;
    let (h, w) = slice.dim();
    let c = cfg.crop.size;
    if h < c || w < c {
        return Err(Error::invalid(format!("slice {h}x{w} smaller than crop size {c}")));
    }
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::shape(format!("{:?}", (h, w)), format!("{:?}", m.dim())));
        }
    }
    let mut rng = cfg.rng_for(slice);

    let (y0, x0) = match cfg.crop.mode {
        CropMode::Center => ((h - c) / 2, (w - c) / 2),
        CropMode::Random => (rng.random_range(0..=h - c), rng.random_range(0..=w - c)),
    };
    let flip_h = rng.random_bool(cfg.flip.horizontal);
    let flip_v = rng.random_bool(cfg.flip.vertical);
    let brightness = sample_range(&mut rng, cfg.jitter.brightness);
    let contrast = sample_range(&mut rng, cfg.jitter.contrast);
    let gamma = sample_range(&mut rng, cfg.jitter.gamma);

    let crop = slice.pixels().slice(s![y0..y0 + c, x0..x0 + c]).to_owned();
    let mut px = resize_bilinear(&crop, cfg.upsample, cfg.upsample);
    flip(&mut px, flip_h, flip_v);
    jitter(&mut px, brightness, contrast, gamma);
    let out = GraySlice::from_clamped(px, slice.sample_id.clone(), slice.slice_index)?;

    let out_mask = match mask {
        Some(m) => {
            let crop = m.labels().slice(s![y0..y0 + c, x0..x0 + c]).to_owned();
            let mut lab = resize_nearest(&crop, cfg.upsample, cfg.upsample);
            flip(&mut lab, flip_h, flip_v);
            Some(m.with_labels(lab)?)
        }
        None => None,
    };
    Ok((out, out_mask))
}

fn flip<T: Clone>(a: &mut Array2<T>, horizontal: bool, vertical: bool) {
    if horizontal {
        a.invert_axis(Axis(1));
    }
    if vertical {
        a.invert_axis(Axis(0));
    }
    if horizontal || vertical {
        *a = a.as_standard_layout().into_owned();
    }
}

fn jitter(px: &mut Array2<f32>, brightness: f64, contrast: f64, gamma: f64) {
    if brightness != 1.0 {
        px.mapv_inplace(|v| (v as f64 * brightness).clamp(0.0, 1.0) as f32);
    }
    if contrast != 1.0 {
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
        px.mapv_inplace(|v| ((v as f64 - mean) * contrast + mean).clamp(0.0, 1.0) as f32);
    }
    if gamma != 1.0 {
        px.mapv_inplace(|v| (v as f64).powf(gamma).clamp(0.0, 1.0) as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClassPalette;

    fn ramp(h: usize, w: usize) -> GraySlice {
        GraySlice::new(
            Array2::from_shape_fn((h, w), |(y, x)| ((y + x) % 256) as f32 / 255.0),
            "s1",
            3,
        )
        .unwrap()
    }

    #[test]
    fn eval_transform_is_center_crop_and_upsample() {
        let s = ramp(240, 250);
        let cfg = AugmentConfig::eval(224, 560);
        let (o, _) = augment(&s, None, &cfg).unwrap();
        let crop = s.pixels().slice(s![8..232, 13..237]).to_owned();
        assert_eq!(o.pixels(), &resize_bilinear(&crop, 560, 560));
    }

    #[test]
    fn undersized_rejected() {
        let s = ramp(100, 300);
        assert!(augment(&s, None, &AugmentConfig::default()).is_err());
    }

    #[test]
    fn mask_follows_geometry() {
        let s = ramp(230, 230);
        let pal = ClassPalette::indexed(3).unwrap();
        let lab = Array2::from_shape_fn((230, 230), |(y, _)| (y * 3 / 230) as u8);
        let m = LabelMask::new(lab, pal).unwrap();
        let cfg = AugmentConfig {
            flip: FlipConfig {
                horizontal: 0.0,
                vertical: 1.0,
            },
            ..AugmentConfig::eval(224, 448)
        };
        let (_, om) = augment(&s, Some(&m), &cfg).unwrap();
        let om = om.unwrap();
        // vertically flipped: brightest class on top
        assert_eq!(om.labels()[[0, 0]], 2);
        assert_eq!(om.labels()[[447, 0]], 0);
    }
}
