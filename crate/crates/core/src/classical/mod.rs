//! Training-free segmenters: multiclass Otsu, K-means and fuzzy C-means.
//!
//! All three produce intensity-ordered classes (darkest cluster is class 0).
//! [`ClassOrderMapping`] translates that order into a dataset palette using
//! the mean GT intensity of each palette class.

pub mod fcm;
pub mod kmeans;
pub mod otsu;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fcm::{fcm_1d, fcm_segment, FcmResult, FcmState};
pub use kmeans::{kmeans_1d, kmeans_segment, KmeansResult};
pub use otsu::{histogram, otsu_from_histogram, otsu_multiclass, OtsuResult, ThresholdSet};

use crate::error::{Error, Result};
use crate::preprocess::{nl_means_with, NlMeansConfig};
use crate::types::{ClassPalette, GraySlice, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalMethod {
    Otsu,
    Kmeans,
    Fcm,
}

impl ClassicalMethod {
    pub const ALL: [ClassicalMethod; 3] = [ClassicalMethod::Otsu, ClassicalMethod::Kmeans, ClassicalMethod::Fcm];

    pub fn name(self) -> &'static str {
        match self {
            ClassicalMethod::Otsu => "otsu",
            ClassicalMethod::Kmeans => "kmeans",
            ClassicalMethod::Fcm => "fcm",
        }
    }
}

impl std::str::FromStr for ClassicalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "otsu" => Ok(Self::Otsu),
            "kmeans" | "k-means" => Ok(Self::Kmeans),
            "fcm" => Ok(Self::Fcm),
            other => Err(Error::Config(format!("unknown classical method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalConfig {
    pub n_bins: usize,
    pub fuzzifier: f64,
    pub denoise: bool,
    pub nlmeans: NlMeansConfig,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            n_bins: otsu::DEFAULT_BINS,
            fuzzifier: fcm::DEFAULT_FUZZIFIER,
            denoise: true,
            nlmeans: NlMeansConfig::default(),
        }
    }
}

/// What a classical run reports alongside its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassicalFit {
    Thresholds { thresholds: Vec<f64> },
    Centers { centers: Vec<f64> },
}

/// Runs one method on one slice, denoising first when configured.
pub fn segment(
    slice: &GraySlice,
    method: ClassicalMethod,
    n_classes: usize,
    seed: u64,
    cfg: &ClassicalConfig,
) -> Result<(LabelMask, ClassicalFit)> {
    let denoised;
    let input = if cfg.denoise {
        denoised = nl_means_with(slice, &cfg.nlmeans)?;
        &denoised
    } else {
        slice
    };
    match method {
        ClassicalMethod::Otsu => {
            let (t, m) = otsu_multiclass(input, n_classes, cfg.n_bins)?;
            Ok((
                m,
                ClassicalFit::Thresholds {
                    thresholds: t.values().to_vec(),
                },
            ))
        }
        ClassicalMethod::Kmeans => {
            let (m, r) = kmeans::kmeans_segment_full(input, n_classes, seed)?;
            Ok((m, ClassicalFit::Centers { centers: r.centers }))
        }
        ClassicalMethod::Fcm => {
            let (st, m) = fcm_segment(input, n_classes, cfg.fuzzifier, seed)?;
            Ok((m, ClassicalFit::Centers { centers: st.centers }))
        }
    }
}

/// Maps intensity-ordered cluster `i` to the palette class with the `i`-th
/// smallest mean GT intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOrderMapping {
    pub cluster_to_class: Vec<u8>,
    pub class_mean_intensity: Vec<f64>,
    #[serde(skip)]
    palette: Option<Arc<ClassPalette>>,
}

impl ClassOrderMapping {
    pub fn from_gt<'a>(pairs: impl IntoIterator<Item = (&'a GraySlice, &'a LabelMask)>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        let mut palette = None;
        for (s, m) in pairs {
            if s.dim() != m.dim() {
                return Err(Error::shape(format!("{:?}", s.dim()), format!("{:?}", m.dim())));
            }
            if palette.is_none() {
                palette = Some(m.palette_arc());
                sums = vec![0.0; m.n_classes()];
                counts = vec![0; m.n_classes()];
            }
            for (&v, &l) in s.pixels().iter().zip(m.labels().iter()) {
                sums[l as usize] += v as f64;
                counts[l as usize] += 1;
            }
        }
        let palette = palette.ok_or_else(|| Error::invalid("no GT masks to derive the class order from"))?;
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "class {:?} never occurs in the GT used for the class order",
                palette.names()[c]
            )));
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
        Ok(Self {
            cluster_to_class: order.iter().map(|&c| c as u8).collect(),
            class_mean_intensity: means,
            palette: Some(palette),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.cluster_to_class.len()
    }

    pub fn apply(&self, clusters: &LabelMask) -> Result<LabelMask> {
        if clusters.n_classes() != self.n_classes() {
            return Err(Error::shape(self.n_classes(), clusters.n_classes()));
        }
        let palette = self
            .palette
            .clone()
            .ok_or_else(|| Error::invalid("mapping has no palette attached"))?;
        clusters.remap(&self.cluster_to_class, palette)
    }

    pub fn with_palette(mut self, palette: Arc<ClassPalette>) -> Self {
        self.palette = Some(palette);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mapping_orders_palette_by_gt_intensity() {
        // palette: oil (bright), brine (dark), rock (mid)
        let pal = Arc::new(ClassPalette::carbonates());
        let s = GraySlice::new(array![[0.9, 0.1, 0.5]], "s", 0).unwrap();
        let gt = LabelMask::new(array![[0, 1, 2]], Arc::clone(&pal)).unwrap();
        let map = ClassOrderMapping::from_gt([(&s, &gt)]).unwrap();
        assert_eq!(map.cluster_to_class, vec![1, 2, 0]);
        let clusters = LabelMask::new(array![[2, 0, 1]], ClassPalette::indexed(3).unwrap()).unwrap();
        assert_eq!(map.apply(&clusters).unwrap(), gt);
    }

    #[test]
    fn methods_agree_on_separable_image() {
        let px = ndarray::Array2::from_shape_fn((30, 30), |(y, _)| [0.1f32, 0.5, 0.9][y / 10]);
        let s = GraySlice::new(px, "s", 0).unwrap();
        let cfg = ClassicalConfig {
            denoise: false,
            ..Default::default()
        };
        let masks: Vec<LabelMask> = ClassicalMethod::ALL
            .iter()
            .map(|&m| segment(&s, m, 3, 1, &cfg).unwrap().0)
            .collect();
        assert_eq!(masks[0], masks[1]);
        assert_eq!(masks[1], masks[2]);
        assert_eq!(masks[0].labels()[[29, 0]], 2);
    }
}
