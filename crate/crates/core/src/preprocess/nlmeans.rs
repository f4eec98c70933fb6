//! Non-local means denoising.
//!
//! Each output pixel is a weighted average of the pixels in a square search
//! window, weighted by `exp(-d² / h²)` where `d²` is the mean squared
//! difference between the patches centred on the two pixels. The image is
//! treated as mirror-extended beyond its borders.
//!
//! The implementation iterates over window offsets and gets every patch
//! distance for that offset from one integral image, so the cost is
//! `O(N · window²)` independent of the patch size.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::filters::reflect;
use crate::error::{Error, Result};
use crate::types::GraySlice;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlMeansConfig {
    pub patch_size: usize,
    pub search_window: usize,
    /// Filtering strength `h`. `None` derives it from the noise estimate.
    pub strength: Option<f64>,
    /// Multiplier applied to the estimated noise sigma when `strength` is unset.
    pub strength_factor: f64,
}

impl Default for NlMeansConfig {
    fn default() -> Self {
        Self {
            patch_size: 5,
            search_window: 21,
            strength: None,
            strength_factor: 0.8,
        }
    }
}

impl NlMeansConfig {
    pub fn resolve_strength(&self, slice: &GraySlice) -> f64 {
        self.strength
            .unwrap_or_else(|| (self.strength_factor * estimate_noise_sigma(slice)).max(1e-6))
    }
}

/// Robust noise estimate: MAD of the 4-neighbour Laplacian, scaled for a
/// Gaussian and for the Laplacian's gain `sqrt(20)` on white noise.
pub fn estimate_noise_sigma(slice: &GraySlice) -> f64 {
    let img = slice.pixels();
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| img[[reflect(y, h), reflect(x, w)]] as f64;
    let mut lap: Vec<f64> = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            lap.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    let med = median(&mut lap.clone());
    let mut dev: Vec<f64> = lap.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&mut dev) / 20f64.sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Denoises one slice. `patch_size` must be odd and no larger than
/// `search_window`; the slice must be at least `search_window` wide and tall.
pub fn nl_means(slice: &GraySlice, patch_size: usize, search_window: usize, strength: f64) -> Result<GraySlice> {
    if patch_size % 2 == 0 || patch_size == 0 {
        return Err(Error::invalid(format!("patch size must be odd, got {patch_size}")));
    }
    if search_window < patch_size || search_window % 2 == 0 {
        return Err(Error::invalid(format!(
            "search window must be odd and >= patch size, got {search_window}"
        )));
    }
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Error::invalid(format!("strength must be positive, got {strength}")));
    }
    let (h, w) = slice.dim();
    if h < search_window || w < search_window {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {search_window}x{search_window} search window"
        )));
    }

    let pr = (patch_size / 2) as isize;
    let sr = (search_window / 2) as isize;
    let img = slice.pixels();
    // Extended image covering every pixel any patch at any offset can touch.
    let pad = pr + sr;
    let eh = h + 2 * pad as usize;
    let ew = w + 2 * pad as usize;
    let ext = Array2::from_shape_fn((eh, ew), |(y, x)| {
        img[[reflect(y as isize - pad, h), reflect(x as isize - pad, w)]] as f64
    });

    let inv_h2 = 1.0 / (strength * strength);
    let inv_area = 1.0 / (patch_size * patch_size) as f64;
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut wsum = Array2::<f64>::zeros((h, w));
    // Squared differences over the patch-padded output region, then its integral image.
    let rh = h + 2 * pr as usize;
    let rw = w + 2 * pr as usize;
    let mut integral = Array2::<f64>::zeros((rh + 1, rw + 1));

    for dy in -sr..=sr {
        for dx in -sr..=sr {
            for y in 0..rh {
                let mut row = 0.0;
                for x in 0..rw {
                    let ay = y as isize + sr;
                    let ax = x as isize + sr;
                    let a = ext[[ay as usize, ax as usize]];
                    let b = ext[[(ay + dy) as usize, (ax + dx) as usize]];
                    row += (a - b) * (a - b);
                    integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
                }
            }
            let ps = patch_size;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (integral[[y + ps, x + ps]] - integral[[y, x + ps]] - integral[[y + ps, x]]
                        + integral[[y, x]])
                        * inv_area;
                    let wt = (-d2.max(0.0) * inv_h2).exp();
                    let v = ext[[(y as isize + pad + dy) as usize, (x as isize + pad + dx) as usize]];
                    acc[[y, x]] += wt * v;
                    wsum[[y, x]] += wt;
                }
            }
        }
    }

    let out = Array2::from_shape_fn((h, w), |(y, x)| ((acc[[y, x]] / wsum[[y, x]]) as f32).clamp(0.0, 1.0));
    slice.with_pixels(out)
}

/// Denoises with a config, estimating the strength when unset.
pub fn nl_means_with(slice: &GraySlice, cfg: &NlMeansConfig) -> Result<GraySlice> {
    nl_means(slice, cfg.patch_size, cfg.search_window, cfg.resolve_strength(slice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy(n: usize, sigma: f32, seed: u64) -> GraySlice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0f32, sigma).unwrap();
        let px = Array2::from_shape_fn((n, n), |_| (0.5 + d.sample(&mut rng)).clamp(0.0, 1.0));
        GraySlice::new(px, "t", 0).unwrap()
    }

    fn variance(a: &Array2<f32>) -> f64 {
        let m = a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        a.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn constant_image_unchanged() {
        let s = GraySlice::new(Array2::from_elem((12, 12), 0.4), "c", 0).unwrap();
        let out = nl_means(&s, 3, 7, 0.1).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn reduces_noise_variance() {
        let s = noisy(32, 0.05, 1);
        let out = nl_means(&s, 5, 11, 0.08).unwrap();
        assert!(variance(out.pixels()) < variance(s.pixels()));
    }

    #[test]
    fn variance_non_increasing_in_strength() {
        let s = noisy(24, 0.05, 2);
        let mut last = f64::INFINITY;
        for h in [0.01, 0.03, 0.1, 0.3, 1.0, 10.0] {
            let v = variance(nl_means(&s, 3, 9, h).unwrap().pixels());
            // near the box-filter limit the curve is flat; allow float-level wobble
            assert!(v <= last * (1.0 + 1e-3), "variance rose at h={h}: {v} > {last}");
            last = v;
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let s = noisy(8, 0.05, 3);
        assert!(nl_means(&s, 4, 7, 0.1).is_err());
        assert!(nl_means(&s, 3, 9, 0.1).is_err());
        assert!(nl_means(&s, 5, 3, 0.1).is_err());
        assert!(nl_means(&s, 3, 7, 0.0).is_err());
    }

    #[test]
    fn noise_estimate_tracks_sigma() {
        let s = noisy(128, 0.05, 4);
        let est = estimate_noise_sigma(&s);
        assert!((est - 0.05).abs() < 0.01, "estimated {est}");
    }
}
