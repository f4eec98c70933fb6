//! Automatic brightness/contrast: percentile clip and linear stretch.

use crate::error::{Error, Result};
use crate::types::GraySlice;

/// Fraction of pixels saturated at each end by default.
pub const DEFAULT_SATURATION: f64 = 0.0035;

/// Low and high clip values: the values at sorted ranks `floor(f N)` and
/// `ceil((1 - f) N) - 1`.
pub fn clip_bounds(values: &[f32], saturation_fraction: f64) -> (f32, f32) {
    let n = values.len();
    let lo_rank = ((saturation_fraction * n as f64).floor() as usize).min(n - 1);
    let hi_rank = (((1.0 - saturation_fraction) * n as f64).ceil() as usize)
        .saturating_sub(1)
        .clamp(lo_rank, n - 1);
    let mut buf = values.to_vec();
    let lo = *buf.select_nth_unstable_by(lo_rank, f32::total_cmp).1;
    let hi = *buf.select_nth_unstable_by(hi_rank, f32::total_cmp).1;
    (lo, hi)
}

/// Maps the clip bounds to 0 and 1, clamping everything outside. A slice
/// whose bounds coincide (e.g. constant) is returned unchanged.
pub fn auto_contrast(slice: &GraySlice, saturation_fraction: f64) -> Result<GraySlice> {
    if !(0.0..0.5).contains(&saturation_fraction) {
        return Err(Error::invalid(format!(
            "saturation fraction must be in [0, 0.5), got {saturation_fraction}"
        )));
    }
    let values: Vec<f32> = slice.pixels().iter().copied().collect();
    let (lo, hi) = clip_bounds(&values, saturation_fraction);
    if hi <= lo {
        return Ok(slice.clone());
    }
    let (lo, span) = (lo as f64, (hi - lo) as f64);
    slice.with_pixels(slice.pixels().mapv(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn zero_fraction_on_full_range_is_identity() {
        let px = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32 / 15.0);
        let s = GraySlice::new(px, "s", 0).unwrap();
        let out = auto_contrast(&s, 0.0).unwrap();
        for (a, b) in out.pixels().iter().zip(s.pixels()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_unchanged() {
        let s = GraySlice::new(Array2::from_elem((3, 3), 0.2), "s", 0).unwrap();
        assert_eq!(auto_contrast(&s, 0.01).unwrap(), s);
    }

    #[test]
    fn rejects_bad_fraction() {
        let s = GraySlice::new(Array2::from_elem((3, 3), 0.2), "s", 0).unwrap();
        assert!(auto_contrast(&s, 0.5).is_err());
        assert!(auto_contrast(&s, -0.1).is_err());
    }

    #[test]
    fn idempotent_after_stretch() {
        let px = Array2::from_shape_fn((8, 8), |(y, x)| 0.2 + 0.5 * ((y * 8 + x) as f32 / 63.0));
        let s = GraySlice::new(px, "s", 0).unwrap();
        let once = auto_contrast(&s, 0.0).unwrap();
        let twice = auto_contrast(&once, 0.0).unwrap();
        for (a, b) in once.pixels().iter().zip(twice.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
