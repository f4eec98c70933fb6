//! K-means on pixel intensities (Lloyd iterations, k-means++ seeding).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{ClassPalette, GraySlice, LabelMask};

pub const MAX_ITER: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Ascending centers; label `i` refers to `centers[i]`.
    pub centers: Vec<f64>,
    pub labels: Vec<u8>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn distinct_count(values: &[f32], limit: usize) -> usize {
    let mut seen: Vec<u32> = Vec::with_capacity(limit);
    for v in values {
        let b = v.to_bits();
        if !seen.contains(&b) {
            seen.push(b);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

fn nearest(x: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = (x - c) * (x - c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

fn plus_plus_init(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = values.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..values.len())
        };
        let c = values[pick];
        centers.push(c);
        for (d, x) in d2.iter_mut().zip(values) {
            *d = d.min((x - c).powi(2));
        }
    }
    centers
}

/// Clusters scalar values into `k` groups.
pub fn kmeans_1d(values: &[f32], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KmeansResult> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {k}")));
    }
    if distinct_count(values, k) < k {
        return Err(Error::Degenerate(format!("fewer than {k} distinct intensities")));
    }
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(&xs, k, &mut rng);
    let mut assign = vec![0usize; xs.len()];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let mut sse = 0.0;
        for (a, &x) in assign.iter_mut().zip(&xs) {
            *a = nearest(x, &centers);
            sse += (x - centers[*a]).powi(2);
        }
        sse_history.push(sse);

        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &x) in assign.iter().zip(&xs) {
            sums[a] += x;
            counts[a] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // empty clusters keep their center
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                shift = shift.max((c - centers[j]).abs());
                centers[j] = c;
            }
        }
        if shift < tol {
            break;
        }
    }
    for (a, &x) in assign.iter_mut().zip(&xs) {
        *a = nearest(x, &centers);
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut rank = vec![0u8; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r as u8;
    }
    Ok(KmeansResult {
        centers: order.iter().map(|&j| centers[j]).collect(),
        labels: assign.iter().map(|&a| rank[a]).collect(),
        sse_history,
        iterations,
    })
}

/// K-means segmentation; class indices ordered by ascending center intensity.
pub fn kmeans_segment(slice: &GraySlice, k: usize, seed: u64) -> Result<LabelMask> {
    Ok(kmeans_segment_full(slice, k, seed)?.0)
}

pub fn kmeans_segment_full(slice: &GraySlice, k: usize, seed: u64) -> Result<(LabelMask, KmeansResult)> {
    let values: Vec<f32> = slice.pixels().iter().copied().collect();
    let res = kmeans_1d(&values, k, seed, MAX_ITER, TOLERANCE)?;
    let labels = Array2::from_shape_vec(slice.dim(), res.labels.clone()).expect("shape preserved");
    Ok((LabelMask::new(labels, ClassPalette::indexed(k)?)?, res))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_levels_split_perfectly() {
        let s = GraySlice::new(ndarray::array![[0.0, 0.0], [1.0, 1.0]], "t", 0).unwrap();
        let (m, r) = kmeans_segment_full(&s, 2, 7).unwrap();
        assert_eq!(r.centers, vec![0.0, 1.0]);
        assert_eq!(m.labels(), &ndarray::array![[0, 0], [1, 1]]);
    }

    #[test]
    fn constant_image_fails() {
        let s = GraySlice::new(Array2::from_elem((4, 4), 0.3), "t", 0).unwrap();
        assert!(matches!(kmeans_segment(&s, 2, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let v: Vec<f32> = (0..200).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        let a = kmeans_1d(&v, 3, 5, MAX_ITER, TOLERANCE).unwrap();
        let b = kmeans_1d(&v, 3, 5, MAX_ITER, TOLERANCE).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centers, b.centers);
    }
}
