//! Multiclass Otsu thresholding.
//!
//! Between-class variance is additive over classes (`Σ S_k² / N_k` up to
//! constants), so the global optimum over all threshold tuples of a binned
//! histogram is found exactly by dynamic programming over bin prefixes in
//! `O(classes · bins²)` instead of enumerating `C(bins, classes-1)` tuples.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassPalette, GraySlice, LabelMask};

pub const MIN_BINS: usize = 16;
pub const DEFAULT_BINS: usize = 256;

/// Sorted cut points in `(0, 1)`; `n_classes - 1` of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    thresholds: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid("thresholds must lie in (0, 1)"));
        }
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
        Ok(Self { thresholds })
    }

    pub fn values(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn n_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Class of an intensity: number of thresholds at or below it.
    pub fn classify(&self, v: f64) -> u8 {
        self.thresholds.iter().filter(|&&t| v >= t).count() as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Last bin of each class except the final one, strictly increasing.
    pub cut_bins: Vec<usize>,
    /// Between-class variance of the chosen partition, in intensity units².
    pub variance: f64,
}

/// Histogram over `[0, 1]` with `n_bins` equal bins; 1.0 falls in the last bin.
pub fn histogram(values: impl IntoIterator<Item = f32>, n_bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; n_bins];
    for v in values {
        h[bin_of(v, n_bins)] += 1;
    }
    h
}

#[inline]
pub fn bin_of(v: f32, n_bins: usize) -> usize {
    ((v as f64 * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Intensity of bin `i`: its center.
#[inline]
pub fn bin_center(i: usize, n_bins: usize) -> f64 {
    (i as f64 + 0.5) / n_bins as f64
}

/// Exact multiclass Otsu on a histogram.
///
/// Ties resolve toward the smallest last threshold, then the smallest
/// preceding ones.
pub fn otsu_from_histogram(hist: &[u64], n_classes: usize) -> Result<OtsuResult> {
    let bins = hist.len();
    if n_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if bins < n_classes {
        return Err(Error::invalid(format!("{bins} bins cannot hold {n_classes} classes")));
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied < n_classes {
        return Err(Error::Degenerate(format!(
            "only {occupied} distinct intensity levels for {n_classes} classes"
        )));
    }

    let mut cnt = vec![0.0f64; bins + 1];
    let mut sum = vec![0.0f64; bins + 1];
    for i in 0..bins {
        cnt[i + 1] = cnt[i] + hist[i] as f64;
        sum[i + 1] = sum[i] + hist[i] as f64 * bin_center(i, bins);
    }
    // S² / N over bins a..=b
    let term = |a: usize, b: usize| {
        let n = cnt[b + 1] - cnt[a];
        if n > 0.0 {
            let s = sum[b + 1] - sum[a];
            s * s / n
        } else {
            0.0
        }
    };

    // best[k][t]: classes 0..=k cover bins 0..=t; arg[k][t]: last bin of class k-1
    let mut best = vec![vec![f64::NEG_INFINITY; bins]; n_classes];
    let mut arg = vec![vec![0usize; bins]; n_classes];
    for t in 0..bins {
        best[0][t] = term(0, t);
    }
    for k in 1..n_classes {
        for t in k..bins {
            let mut bv = f64::NEG_INFINITY;
            let mut bs = 0;
            for s in (k - 1)..t {
                let v = best[k - 1][s] + term(s + 1, t);
                if v > bv {
                    bv = v;
                    bs = s;
                }
            }
            best[k][t] = bv;
            arg[k][t] = bs;
        }
    }

    let mut cuts = vec![0usize; n_classes - 1];
    let mut t = bins - 1;
    for k in (1..n_classes).rev() {
        t = arg[k][t];
        cuts[k - 1] = t;
    }
    let total = cnt[bins];
    let mu = sum[bins] / total;
    let variance = best[n_classes - 1][bins - 1] / total - mu * mu;
    Ok(OtsuResult { cut_bins: cuts, variance })
}

pub fn thresholds_from_cuts(cut_bins: &[usize], n_bins: usize) -> Result<ThresholdSet> {
    ThresholdSet::new(cut_bins.iter().map(|&c| (c + 1) as f64 / n_bins as f64).collect())
}

/// Segments a slice into `n_classes` intensity intervals, dark to bright.
pub fn otsu_multiclass(slice: &GraySlice, n_classes: usize, n_bins: usize) -> Result<(ThresholdSet, LabelMask)> {
    if !(2..=5).contains(&n_classes) {
        return Err(Error::invalid(format!("n_classes must be in [2, 5], got {n_classes}")));
    }
    if n_bins < MIN_BINS {
        return Err(Error::invalid(format!("n_bins must be >= {MIN_BINS}, got {n_bins}")));
    }
    let hist = histogram(slice.pixels().iter().copied(), n_bins);
    let res = otsu_from_histogram(&hist, n_classes)?;
    let ts = thresholds_from_cuts(&res.cut_bins, n_bins)?;
    let labels: Array2<u8> = slice.pixels().mapv(|v| {
        let b = bin_of(v, n_bins);
        res.cut_bins.iter().filter(|&&c| b > c).count() as u8
    });
    let mask = LabelMask::new(labels, ClassPalette::indexed(n_classes)?)?;
    Ok((ts, mask))
}
