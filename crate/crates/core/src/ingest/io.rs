//! Array-file persistence for slices and masks (NPY container).

use std::path::Path;

use ndarray::{Array2, Array3};
use ndarray_npy::{read_npy, write_npy};

use crate::error::Result;
use crate::types::{ClassPalette, FeatureMap, GraySlice, LabelMask};

pub fn save_slice(path: impl AsRef<Path>, slice: &GraySlice) -> Result<()> {
    write_npy(path, slice.pixels())?;
    Ok(())
}

pub fn load_slice(path: impl AsRef<Path>, sample_id: &str, slice_index: usize) -> Result<GraySlice> {
    let px: Array2<f32> = read_npy(path)?;
    GraySlice::new(px, sample_id, slice_index)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_npy(path, mask.labels())?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>, palette: impl Into<std::sync::Arc<ClassPalette>>) -> Result<LabelMask> {
    let labels: Array2<u8> = read_npy(path)?;
    LabelMask::new(labels, palette)
}

/// H x W x C feature array.
pub fn save_features(path: impl AsRef<Path>, features: &FeatureMap) -> Result<()> {
    write_npy(path, features.values())?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>, extractor: &str) -> Result<FeatureMap> {
    let v: Array3<f32> = read_npy(path)?;
    FeatureMap::new(v, extractor)
}
