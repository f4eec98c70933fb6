//! Basic feature extractor: multiscale Gaussian pixel features.
//!
//! Channel layout, for each scale `σ` in ascending order:
//!
//! | offset | feature                                                   |
//! |--------|-----------------------------------------------------------|
//! | 0      | Gaussian-smoothed intensity                               |
//! | 1      | gradient magnitude from derivative-of-Gaussian filters    |
//! | 2      | smaller eigenvalue of the structure tensor (integration σ) |

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::filters::{correlate_axis, gaussian_blur, gaussian_derivative_taps, gaussian_taps};
use crate::error::{Error, Result};
use crate::types::{FeatureMap, GraySlice};

pub const FEATURES_PER_SCALE: usize = 3;
pub const BFE_CHANNELS: usize = 15;
pub const BFE_TAG: &str = "bfe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfeConfig {
    pub scales: Vec<f64>,
}

impl Default for BfeConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl BfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() * FEATURES_PER_SCALE != BFE_CHANNELS {
            return Err(Error::Config(format!(
                "BFE needs {} scales for {BFE_CHANNELS} channels, got {}",
                BFE_CHANNELS / FEATURES_PER_SCALE,
                self.scales.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("BFE scales must be positive".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("BFE scales must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.scales
            .iter()
            .flat_map(|s| {
                [
                    format!("smooth_s{s}"),
                    format!("gradmag_s{s}"),
                    format!("structure_min_s{s}"),
                ]
            })
            .collect()
    }
}

/// Computes the 15-channel feature map of a (denoised) slice.
pub fn bfe(slice: &GraySlice, cfg: &BfeConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let img = slice.pixels().mapv(|v| v as f64);
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input to feature extractor"));
    }
    let (h, w) = img.dim();
    let mut out = Array3::<f32>::zeros((h, w, cfg.scales.len() * FEATURES_PER_SCALE));
    for (si, &sigma) in cfg.scales.iter().enumerate() {
        let [smooth, grad, structure] = scale_features(&img, sigma);
        let base = si * FEATURES_PER_SCALE;
        for ((y, x), v) in smooth.indexed_iter() {
            out[[y, x, base]] = *v as f32;
            out[[y, x, base + 1]] = grad[[y, x]] as f32;
            out[[y, x, base + 2]] = structure[[y, x]] as f32;
        }
    }
    Ok(FeatureMap::new(out, BFE_TAG)?.with_source(slice.id()))
}

fn scale_features(img: &Array2<f64>, sigma: f64) -> [Array2<f64>; 3] {
    let g = gaussian_taps(sigma);
    let dg = gaussian_derivative_taps(sigma);
    let smooth_y = correlate_axis(img, 0, &g);
    let smooth = correlate_axis(&smooth_y, 1, &g);
    let gx = correlate_axis(&smooth_y, 1, &dg);
    let gy = correlate_axis(&correlate_axis(img, 1, &g), 0, &dg);
    let grad = ndarray::Zip::from(&gx).and(&gy).map_collect(|a, b| (a * a + b * b).sqrt());
    let jxx = gaussian_blur(&(&gx * &gx), sigma);
    let jxy = gaussian_blur(&(&gx * &gy), sigma);
    let jyy = gaussian_blur(&(&gy * &gy), sigma);
    let structure = ndarray::Zip::from(&jxx).and(&jxy).and(&jyy).map_collect(|&a, &b, &c| {
        let half_trace = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        // symmetric PSD: clamp rounding below zero
        (half_trace - disc).max(0.0)
    });
    [smooth, grad, structure]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BfeConfig::default().validate().is_ok());
        assert!(BfeConfig { scales: vec![1.0, 2.0] }.validate().is_err());
        assert!(BfeConfig { scales: vec![1.0, 2.0, 2.0, 8.0, 16.0] }.validate().is_err());
        assert!(BfeConfig { scales: vec![0.0, 2.0, 3.0, 8.0, 16.0] }.validate().is_err());
        assert_eq!(BfeConfig::default().channel_names().len(), 15);
    }

    #[test]
    fn constant_image_channels() {
        let s = GraySlice::new(Array2::from_elem((20, 17), 0.6), "c", 0).unwrap();
        let f = bfe(&s, &BfeConfig::default()).unwrap();
        assert_eq!(f.dim(), (20, 17, 15));
        for v in f.values().outer_iter().flat_map(|r| r.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>()) {
            for si in 0..5 {
                assert!((v[si * 3] - 0.6).abs() < 1e-6);
                assert_eq!(v[si * 3 + 1], 0.0);
                assert_eq!(v[si * 3 + 2], 0.0);
            }
        }
    }
}
