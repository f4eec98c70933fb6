//! Deterministic synthetic inputs shared by the benchmarks.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rockseg::{ClassPalette, FeatureMap, GraySlice, LabelMask};

/// Cheap hash noise in [0, 1); stable across platforms.
fn noise(i: usize, seed: u64) -> f32 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed;
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    (x >> 40) as f32 / (1u64 << 24) as f32
}

/// Three-phase slice: horizontal bands at 0.2 / 0.5 / 0.8 plus noise.
pub fn phase_slice(size: usize, seed: u64) -> GraySlice {
    let px = Array2::from_shape_fn((size, size), |(y, x)| {
        let base = 0.2 + 0.3 * (y * 3 / size) as f32;
        (base + 0.1 * (noise(y * size + x, seed) - 0.5)).clamp(0.0, 1.0)
    });
    GraySlice::new(px, "bench", seed as usize).expect("valid slice")
}

/// Ground truth matching [`phase_slice`].
pub fn phase_mask(size: usize) -> LabelMask {
    let labels = Array2::from_shape_fn((size, size), |(y, _)| (y * 3 / size) as u8);
    LabelMask::new(labels, Arc::new(ClassPalette::indexed(3).expect("palette"))).expect("valid mask")
}

pub fn random_features(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let v = Array3::from_shape_fn((h, w, c), |(y, x, k)| noise((y * w + x) * c + k, seed));
    FeatureMap::new(v, "bench").expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(phase_slice(32, 1).pixels(), phase_slice(32, 1).pixels());
        assert_ne!(phase_slice(32, 1).pixels(), phase_slice(32, 2).pixels());
        assert_eq!(phase_mask(30).class_counts(), vec![300, 300, 300]);
    }
}
