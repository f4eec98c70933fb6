//! PCA of per-pixel features, first three components shown as RGB.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::FeatureMap;

/// Exact SVD up to this many rows or columns, subspace iteration beyond.
const EXACT_LIMIT: usize = 256;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 40;

#[derive(Debug, Clone)]
pub struct PcaView {
    /// 3 x D, one principal direction per row (zero rows when rank < 3).
    pub components: Array2<f64>,
    pub explained_variance: [f64; 3],
    /// Raw projection, H x W x 3.
    pub projected: Array3<f32>,
    /// Per-channel min-max normalized projection.
    pub rgb: image::RgbImage,
    pub warnings: Vec<String>,
}

/// Top-`k` right singular vectors (as columns) and singular values of a
/// centered N x D matrix. Signs are fixed so each vector's largest entry is positive.
pub fn top_components(x: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let (mut v, s) = if n.min(d) <= EXACT_LIMIT {
        let svd = x.clone().svd(false, true);
        let vt = svd.v_t.expect("v_t requested");
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut v = DMatrix::zeros(d, k);
        let mut s = vec![0.0; k];
        for (j, &i) in idx.iter().take(k).enumerate() {
            v.set_column(j, &vt.row(i).transpose());
            s[j] = svd.singular_values[i];
        }
        (v, s)
    } else {
        subspace_iteration(x, k)
    };
    for j in 0..k {
        let col = v.column(j);
        let imax = col.iamax();
        if col[imax] < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    (v, s)
}

fn subspace_iteration(x: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (_, d) = x.shape();
    let l = (k + OVERSAMPLE).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut q = DMatrix::from_fn(d, l, |_, _| StandardNormal.sample(&mut rng));
    q = q.qr().q();
    for _ in 0..POWER_ITERS {
        let y = x * &q;
        q = (x.transpose() * y).qr().q();
    }
    let b = x * &q;
    let svd = b.svd(false, true);
    let wt = svd.v_t.expect("v_t requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut v = DMatrix::zeros(d, k);
    let mut s = vec![0.0; k];
    for (j, &i) in idx.iter().take(k).enumerate() {
        v.set_column(j, &(&q * wt.row(i).transpose()));
        s[j] = svd.singular_values[i];
    }
    (v, s)
}

pub fn pca_rgb(features: &FeatureMap) -> Result<PcaView> {
    let (h, w, d) = features.dim();
    let n = h * w;
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 pixels, got {h}x{w}")));
    }
    let vals = features.values();
    let mut x = DMatrix::from_fn(n, d, |i, j| vals[[i / w, i % w, j]] as f64);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let (mut v, s) = top_components(&x, 3.min(d));
    let mut warnings = Vec::new();
    let scale = s.first().copied().unwrap_or(0.0);
    let mut ev = [0.0; 3];
    let mut comps = Array2::zeros((3, d));
    for j in 0..3 {
        let sj = s.get(j).copied().unwrap_or(0.0);
        let zero = j >= v.ncols() || sj <= 1e-9 * scale.max(1e-300) || scale < 1e-12;
        if zero {
            warnings.push(format!("feature matrix has rank < 3: component {} padded with zeros", j + 1));
            if j < v.ncols() {
                v.column_mut(j).fill(0.0);
            }
            continue;
        }
        ev[j] = sj * sj / (n as f64 - 1.0);
        for c in 0..d {
            comps[[j, c]] = v[(c, j)];
        }
    }
    let mut projected = Array3::<f32>::zeros((h, w, 3));
    for j in 0..v.ncols().min(3) {
        let p = &x * v.column(j);
        for i in 0..n {
            projected[[i / w, i % w, j]] = p[i] as f32;
        }
    }
    if warnings.len() == 3 {
        warnings = vec!["feature map has zero variance: rendering all gray".to_string()];
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    let mut ranges = [(0f32, 0f32); 3];
    for (c, r) in ranges.iter_mut().enumerate() {
        let ch = projected.index_axis(ndarray::Axis(2), c);
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        *r = (lo, hi);
    }
    for y in 0..h {
        for xx in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let (lo, hi) = ranges[c];
                let t = if hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1e-30) {
                    (projected[[y, xx, c]] - lo) / (hi - lo)
                } else {
                    0.5
                };
                px[c] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            rgb.put_pixel(xx as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(PcaView {
        components: comps,
        explained_variance: ev,
        projected,
        rgb,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Pixels living in span of three orthonormal directions with distinct variances.
    fn structured(h: usize, w: usize, d: usize, seed: u64) -> (FeatureMap, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = DMatrix::<f64>::from_fn(d, 3, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let sd = [5.0, 2.0, 1.0];
        let mut vals = Array3::zeros((h, w, d));
        for y in 0..h {
            for x in 0..w {
                let coef: Vec<f64> = sd.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                for c in 0..d {
                    vals[[y, x, c]] = (0..3).map(|k| coef[k] * basis[(c, k)]).sum::<f64>() as f32 + 0.3;
                }
            }
        }
        (FeatureMap::new(vals, "test").unwrap(), basis)
    }

    fn comps_matrix(v: &PcaView) -> DMatrix<f64> {
        let d = v.components.ncols();
        DMatrix::from_fn(d, 3, |c, j| v.components[[j, c]])
    }

    /// Largest principal angle between two 3-dim subspaces with orthonormal bases.
    fn max_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let s = (a.transpose() * b).svd(false, false).singular_values;
        s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).fold(0.0, f64::max)
    }

    #[test]
    fn recovers_known_subspace() {
        for (h, w, d) in [(8, 8, 20), (20, 20, 300)] {
            let (fm, basis) = structured(h, w, d, 3);
            let v = pca_rgb(&fm).unwrap();
            // oracle: eigenvectors of the directly computed covariance
            let vals = fm.values();
            let n = h * w;
            let mut x = DMatrix::from_fn(n, d, |i, j| vals[[i / w, i % w, j]] as f64);
            for j in 0..d {
                let m = x.column(j).mean();
                x.column_mut(j).add_scalar_mut(-m);
            }
            let cov = x.transpose() * &x / (n as f64 - 1.0);
            let eig = cov.symmetric_eigen();
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let top = DMatrix::from_fn(d, 3, |c, j| eig.eigenvectors[(c, idx[j])]);
            let got = comps_matrix(&v);
            assert!(max_angle(&got, &top) < 1e-3, "d={d}");
            assert!(max_angle(&got, &basis) < 0.2);
            for j in 0..3 {
                let rel = (v.explained_variance[j] - eig.eigenvalues[idx[j]]).abs() / eig.eigenvalues[idx[j]];
                assert!(rel < 1e-4);
            }
        }
    }

    #[test]
    fn components_orthonormal_and_projection_consistent() {
        let (fm, _) = structured(10, 12, 40, 9);
        let v = pca_rgb(&fm).unwrap();
        let c = comps_matrix(&v);
        let g = c.transpose() * &c;
        assert!((g - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-6);
        let vals = fm.values();
        let mean: Vec<f64> = (0..40)
            .map(|ch| vals.index_axis(ndarray::Axis(2), ch).iter().map(|&x| x as f64).sum::<f64>() / 120.0)
            .collect();
        for (y, x) in [(0, 0), (4, 7), (9, 11)] {
            for j in 0..3 {
                let p: f64 = (0..40).map(|ch| (vals[[y, x, ch]] as f64 - mean[ch]) * c[(ch, j)]).sum();
                assert!((p - v.projected[[y, x, j]] as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rotation_preserves_explained_variance() {
        let (fm, _) = structured(9, 9, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rot = DMatrix::<f64>::from_fn(16, 16, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let vals = fm.values();
        let rotated = Array3::from_shape_fn((9, 9, 16), |(y, x, c)| {
            (0..16).map(|k| vals[[y, x, k]] as f64 * rot[(k, c)]).sum::<f64>() as f32
        });
        let a = pca_rgb(&fm).unwrap();
        let b = pca_rgb(&FeatureMap::new(rotated, "rot").unwrap()).unwrap();
        for j in 0..3 {
            assert!((a.explained_variance[j] - b.explained_variance[j]).abs() / a.explained_variance[j] < 1e-4);
        }
    }

    #[test]
    fn constant_map_is_gray() {
        let fm = FeatureMap::new(Array3::from_elem((4, 4, 5), 1.5), "c").unwrap();
        let v = pca_rgb(&fm).unwrap();
        assert!(!v.warnings.is_empty());
        assert!(v.rgb.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn rank_two_pads_third_channel() {
        let vals = Array3::from_shape_fn((5, 5, 4), |(y, x, c)| match c {
            0 => y as f32,
            1 => x as f32 * 2.0,
            _ => 0.0,
        });
        let v = pca_rgb(&FeatureMap::new(vals, "r2").unwrap()).unwrap();
        assert_eq!(v.warnings.len(), 1);
        assert_eq!(v.explained_variance[2], 0.0);
        assert!(v.components.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_few_pixels() {
        let fm = FeatureMap::new(Array3::zeros((1, 2, 3)), "s").unwrap();
        assert!(pca_rgb(&fm).is_err());
    }
}
