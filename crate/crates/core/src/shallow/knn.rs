//! Brute-force k-nearest neighbours for image classification and dense probing.
//!
//! Neighbours are ordered by (distance, insertion index); the vote picks the
//! most frequent label with ties going to the lowest class index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::argmax_lowest;
use crate::error::{Error, Result};
use crate::preprocess::filters::{resize_bilinear3, resize_nearest};
use crate::types::{ClassPalette, FeatureMap, LabelMask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnTask {
    ImageClassification,
    PixelProbing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
    pub task: KnnTask,
    /// Probe grid side for pixel probing.
    pub probe_size: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 50,
            metric: Metric::Euclidean,
            task: KnnTask::PixelProbing,
            probe_size: 128,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(PartialEq)]
struct Cand(f32, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Stored training matrix; this is the whole "model".
#[derive(Debug, Clone)]
pub struct KnnIndex {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<u8>,
    n_classes: usize,
    metric: Metric,
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl KnnIndex {
    pub fn new(dim: usize, n_classes: usize, metric: Metric) -> Self {
        Self {
            dim,
            data: Vec::new(),
            labels: Vec::new(),
            n_classes,
            metric,
        }
    }

    pub fn push(&mut self, v: &[f32], label: u8) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(self.dim, v.len()));
        }
        if label as usize >= self.n_classes {
            return Err(Error::invalid(format!("label {label} >= {} classes", self.n_classes)));
        }
        let start = self.data.len();
        self.data.extend_from_slice(v);
        if self.metric == Metric::Cosine {
            normalize(&mut self.data[start..]);
        }
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn distance(&self, q: &[f32], i: usize) -> f32 {
        let row = &self.data[i * self.dim..(i + 1) * self.dim];
        match self.metric {
            Metric::Euclidean => row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
            Metric::Cosine => 1.0 - row.iter().zip(q).map(|(a, b)| a * b).sum::<f32>(),
        }
    }

    /// Indices of the `k` nearest stored rows, nearest first.
    pub fn neighbors(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::shape(self.dim, query.len()));
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("k={k} but the index holds {} points", self.len())));
        }
        let mut q = query.to_vec();
        if self.metric == Metric::Cosine {
            normalize(&mut q);
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for i in 0..self.len() {
            let c = Cand(self.distance(&q, i), i);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(c);
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|c| c.1).collect())
    }

    pub fn predict(&self, query: &[f32], k: usize) -> Result<u8> {
        let mut votes = vec![0u64; self.n_classes];
        for i in self.neighbors(query, k)? {
            votes[self.labels[i] as usize] += 1;
        }
        Ok(argmax_lowest(&votes))
    }

    pub fn predict_many(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<u8>> {
        queries.par_iter().map(|q| self.predict(q, k)).collect()
    }
}

/// Majority label among the `k` nearest training embeddings for each test embedding.
pub fn knn_classify_images(train: &[(Vec<f32>, u8)], test: &[Vec<f32>], cfg: &KnnConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let dim = train
        .first()
        .map(|t| t.0.len())
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let n_classes = train.iter().map(|t| t.1 as usize).max().unwrap_or(0) + 1;
    let mut index = KnnIndex::new(dim, n_classes, cfg.metric);
    for (v, l) in train {
        index.push(v, *l)?;
    }
    index.predict_many(test, cfg.k)
}

/// Bilinear resample of a feature map to the probe grid.
pub fn probe_features(f: &FeatureMap, size: usize) -> Result<FeatureMap> {
    FeatureMap::new(resize_bilinear3(f.values(), size, size), f.extractor.clone())
}

/// Nearest-neighbour resample of a mask to the probe grid.
pub fn probe_mask(m: &LabelMask, size: usize) -> Result<LabelMask> {
    m.with_labels(resize_nearest(m.labels(), size, size))
}

/// Dense kNN probe: every training pixel feature at probe resolution is one stored point.
pub struct KnnProbe {
    index: KnnIndex,
    palette: Arc<ClassPalette>,
    cfg: KnnConfig,
}

impl KnnProbe {
    pub fn fit(train_features: &[FeatureMap], train_masks: &[LabelMask], cfg: &KnnConfig) -> Result<Self> {
        cfg.validate()?;
        if train_features.is_empty() || train_features.len() != train_masks.len() {
            return Err(Error::shape(
                format!("{} masks", train_features.len()),
                format!("{} masks", train_masks.len()),
            ));
        }
        let s = cfg.probe_size;
        let dim = train_features[0].channels();
        let palette = train_masks[0].palette_arc();
        let mut index = KnnIndex::new(dim, palette.len(), cfg.metric);
        for (f, m) in train_features.iter().zip(train_masks) {
            if m.palette() != &*palette {
                return Err(Error::invalid("training masks use different palettes"));
            }
            let pf = probe_features(f, s)?;
            let pm = probe_mask(m, s)?;
            if pf.channels() != dim || (pf.height(), pf.width()) != pm.dim() {
                return Err(Error::shape(
                    format!("{s}x{s}x{dim}"),
                    format!("{}x{}x{}", pf.height(), pf.width(), pf.channels()),
                ));
            }
            for y in 0..s {
                for x in 0..s {
                    index.push(&pf.pixel(y, x).to_vec(), pm.labels()[[y, x]])?;
                }
            }
        }
        Ok(Self {
            index,
            palette,
            cfg: cfg.clone(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.index.len()
    }

    pub fn predict(&self, test: &FeatureMap) -> Result<LabelMask> {
        let s = self.cfg.probe_size;
        let pf = probe_features(test, s)?;
        if pf.channels() != self.index.dim() {
            return Err(Error::shape(self.index.dim(), pf.channels()));
        }
        let labels: Vec<u8> = (0..s * s)
            .into_par_iter()
            .map(|p| self.index.predict(&pf.pixel(p / s, p % s).to_vec(), self.cfg.k))
            .collect::<Result<_>>()?;
        LabelMask::new(
            Array2::from_shape_vec((s, s), labels).expect("s*s labels"),
            self.palette.clone(),
        )
    }
}

pub fn knn_probe_segmentation(
    train_features: &[FeatureMap],
    train_masks: &[LabelMask],
    test_features: &FeatureMap,
    cfg: &KnnConfig,
) -> Result<LabelMask> {
    KnnProbe::fit(train_features, train_masks, cfg)?.predict(test_features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_point_k1() {
        let train = vec![(vec![0.0, 0.0], 0), (vec![1.0, 1.0], 1), (vec![5.0, 5.0], 2)];
        let cfg = KnnConfig { k: 1, ..Default::default() };
        assert_eq!(knn_classify_images(&train, &[vec![1.0, 1.0]], &cfg).unwrap(), vec![1]);
    }

    #[test]
    fn forced_tie_lowest_class() {
        let train = vec![(vec![0.0], 1), (vec![1.0], 0), (vec![2.0], 1), (vec![3.0], 0)];
        let cfg = KnnConfig { k: 4, ..Default::default() };
        assert_eq!(knn_classify_images(&train, &[vec![0.0]], &cfg).unwrap(), vec![0]);
    }

    #[test]
    fn distance_ties_by_insertion() {
        let mut idx = KnnIndex::new(1, 2, Metric::Euclidean);
        idx.push(&[1.0], 1).unwrap();
        idx.push(&[-1.0], 0).unwrap();
        assert_eq!(idx.neighbors(&[0.0], 1).unwrap(), vec![0]);
        assert_eq!(idx.predict(&[0.0], 1).unwrap(), 1);
    }

    #[test]
    fn k_too_large() {
        let train = vec![(vec![0.0], 0)];
        let cfg = KnnConfig { k: 2, ..Default::default() };
        assert!(knn_classify_images(&train, &[vec![0.0]], &cfg).is_err());
    }

    #[test]
    fn cosine_ignores_scale() {
        let train = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)];
        let cfg = KnnConfig {
            k: 1,
            metric: Metric::Cosine,
            ..Default::default()
        };
        assert_eq!(knn_classify_images(&train, &[vec![0.1, 5.0]], &cfg).unwrap(), vec![1]);
    }

    #[test]
    fn probe_self_recovers_gt() {
        let f = FeatureMap::new(
            ndarray::Array3::from_shape_fn((8, 8, 2), |(y, x, c)| if c == 0 { y as f32 } else { x as f32 }),
            "t",
        )
        .unwrap();
        let m = LabelMask::new(
            Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) % 3) as u8),
            ClassPalette::carbonates(),
        )
        .unwrap();
        let cfg = KnnConfig {
            k: 1,
            probe_size: 4,
            ..Default::default()
        };
        let pred = knn_probe_segmentation(&[f.clone()], &[m.clone()], &f, &cfg).unwrap();
        assert_eq!(pred, probe_mask(&m, 4).unwrap());
    }
}
