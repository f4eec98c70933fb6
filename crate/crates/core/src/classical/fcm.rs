//! Fuzzy C-means on pixel intensities.
//!
//! Alternates `c_j = Σ u_ij^m x_i / Σ u_ij^m` and
//! `u_ij = 1 / Σ_l (d_ij / d_il)^(2/(m-1))`. A pixel sitting exactly on a
//! center gets full membership in that center.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassPalette, GraySlice, LabelMask};

pub const MAX_ITER: usize = 300;
pub const TOLERANCE: f64 = 1e-6;
pub const DEFAULT_FUZZIFIER: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcmState {
    /// Ascending centers.
    pub centers: Vec<f64>,
    /// `N x c`, rows sum to one.
    pub memberships: Array2<f64>,
    pub m: f64,
}

impl FcmState {
    /// `Σ_ij u_ij^m (x_i - c_j)²`.
    pub fn objective(&self, values: &[f32]) -> f64 {
        let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        objective_of(&xs, &self.centers, &self.memberships, self.m)
    }

    pub fn hard_labels(&self) -> Vec<u8> {
        self.memberships
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &u) in row.iter().enumerate() {
                    if u > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FcmResult {
    pub state: FcmState,
    /// Objective of the returned state.
    pub objective: f64,
    pub objective_history: Vec<f64>,
    /// Largest `|Σ_j u_ij - 1|` after each membership update.
    pub row_sum_error_history: Vec<f64>,
    pub iterations: usize,
}

fn objective_of(xs: &[f64], centers: &[f64], u: &Array2<f64>, m: f64) -> f64 {
    let mut j = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        for (c, &ctr) in centers.iter().enumerate() {
            j += u[[i, c]].powf(m) * (x - ctr).powi(2);
        }
    }
    j
}

fn update_memberships(xs: &[f64], centers: &[f64], m: f64, u: &mut Array2<f64>) -> f64 {
    let c = centers.len();
    let p = 2.0 / (m - 1.0);
    let mut max_err: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let d: Vec<f64> = centers.iter().map(|ctr| (x - ctr).abs()).collect();
        if let Some(hit) = d.iter().position(|&v| v == 0.0) {
            for j in 0..c {
                u[[i, j]] = if j == hit { 1.0 } else { 0.0 };
            }
            continue;
        }
        let mut row_sum = 0.0;
        for j in 0..c {
            let s: f64 = d.iter().map(|&dl| (d[j] / dl).powf(p)).sum();
            u[[i, j]] = 1.0 / s;
            row_sum += u[[i, j]];
        }
        max_err = max_err.max((row_sum - 1.0).abs());
    }
    max_err
}

fn update_centers(xs: &[f64], u: &Array2<f64>, m: f64, centers: &mut [f64]) {
    for (j, ctr) in centers.iter_mut().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let w = u[[i, j]].powf(m);
            num += w * x;
            den += w;
        }
        if den > 0.0 {
            *ctr = num / den;
        }
    }
}

pub fn fcm_1d(values: &[f32], c: usize, m: f64, seed: u64, max_iter: usize, tol: f64) -> Result<FcmResult> {
    if c < 2 {
        return Err(Error::invalid(format!("c must be >= 2, got {c}")));
    }
    if !(m > 1.0 && m.is_finite()) {
        return Err(Error::invalid(format!("fuzzifier must be > 1, got {m}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("no pixels"));
    }
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let n = xs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Array2::from_shape_fn((n, c), |_| rng.random_range(0.01..1.0));
    for mut row in u.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }

    let mut centers = vec![0.0; c];
    let mut objective_history = Vec::new();
    let mut row_sum_error_history = Vec::new();
    let mut iterations = 0;
    update_centers(&xs, &u, m, &mut centers);
    for _ in 0..max_iter {
        iterations += 1;
        row_sum_error_history.push(update_memberships(&xs, &centers, m, &mut u));
        let prev = centers.clone();
        update_centers(&xs, &u, m, &mut centers);
        objective_history.push(objective_of(&xs, &centers, &u, m));
        let shift = prev.iter().zip(&centers).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if shift < tol {
            break;
        }
    }
    // memberships consistent with the final centers
    row_sum_error_history.push(update_memberships(&xs, &centers, m, &mut u));

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let sorted_u = Array2::from_shape_fn((n, c), |(i, j)| u[[i, order[j]]]);
    let state = FcmState {
        centers: order.iter().map(|&j| centers[j]).collect(),
        memberships: sorted_u,
        m,
    };
    let objective = state.objective(values);
    Ok(FcmResult {
        state,
        objective,
        objective_history,
        row_sum_error_history,
        iterations,
    })
}

/// FCM segmentation; mask is the argmax membership with classes ordered by
/// ascending center.
pub fn fcm_segment(slice: &GraySlice, c: usize, m: f64, seed: u64) -> Result<(FcmState, LabelMask)> {
    let values: Vec<f32> = slice.pixels().iter().copied().collect();
    let res = fcm_1d(&values, c, m, seed, MAX_ITER, TOLERANCE)?;
    let labels = Array2::from_shape_vec(slice.dim(), res.state.hard_labels()).expect("shape preserved");
    let mask = LabelMask::new(labels, ClassPalette::indexed(c)?)?;
    Ok((res.state, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_levels_converge_to_extremes() {
        let s = GraySlice::new(ndarray::array![[0.0, 0.0], [1.0, 1.0]], "t", 0).unwrap();
        let (st, m) = fcm_segment(&s, 2, 2.0, 3).unwrap();
        assert!(st.centers[0].abs() < 1e-6 && (st.centers[1] - 1.0).abs() < 1e-6);
        assert_eq!(m.labels(), &ndarray::array![[0, 0], [1, 1]]);
    }

    #[test]
    fn singularity_gives_full_membership() {
        let mut u = Array2::zeros((2, 2));
        update_memberships(&[0.5, 0.7], &[0.5, 0.9], 2.0, &mut u);
        assert_eq!(u.row(0).to_vec(), vec![1.0, 0.0]);
        assert!((u.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(fcm_1d(&[0.1, 0.2], 1, 2.0, 0, 10, 1e-6).is_err());
        assert!(fcm_1d(&[0.1, 0.2], 2, 1.0, 0, 10, 1e-6).is_err());
    }
}
