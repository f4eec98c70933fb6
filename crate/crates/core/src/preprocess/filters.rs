//! Separable kernels, reflect-extended indexing and resampling on 2D arrays.

use ndarray::{Array2, Array3, Axis};

/// Index into a signal of length `n` extended by mirror reflection about
/// the outer pixel edges (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// One-sided taps of a symmetric or antisymmetric 1D kernel.
#[derive(Debug, Clone)]
pub enum Taps {
    /// `k[0]` is the center weight, `k[i]` applies to offsets `±i`.
    Symmetric(Vec<f64>),
    /// `k[i-1]` multiplies `x[p+i] - x[p-i]`.
    Antisymmetric(Vec<f64>),
}

fn gaussian_weights(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as usize;
    let w: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    w.into_iter().map(|v| v / total).collect()
}

/// Normalized Gaussian truncated at four standard deviations.
pub fn gaussian_taps(sigma: f64) -> Taps {
    Taps::Symmetric(gaussian_weights(sigma))
}

/// First derivative of the normalized Gaussian.
pub fn gaussian_derivative_taps(sigma: f64) -> Taps {
    let w = gaussian_weights(sigma);
    Taps::Antisymmetric(
        w.iter()
            .enumerate()
            .skip(1)
            .map(|(i, v)| i as f64 / (sigma * sigma) * v)
            .collect(),
    )
}

/// Correlates every line along `axis` (0 = down columns, 1 = along rows).
pub fn correlate_axis(img: &Array2<f64>, axis: usize, taps: &Taps) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(img.dim());
    for (src, mut dst) in img.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        let n = src.len();
        for p in 0..n {
            let pi = p as isize;
            let v = match taps {
                Taps::Symmetric(k) => {
                    let mut acc = k[0] * src[p];
                    for (i, &w) in k.iter().enumerate().skip(1) {
                        let i = i as isize;
                        acc += w * (src[reflect(pi + i, n)] + src[reflect(pi - i, n)]);
                    }
                    acc
                }
                Taps::Antisymmetric(k) => {
                    let mut acc = 0.0;
                    for (i, &w) in k.iter().enumerate() {
                        let i = i as isize + 1;
                        acc += w * (src[reflect(pi + i, n)] - src[reflect(pi - i, n)]);
                    }
                    acc
                }
            };
            dst[p] = v;
        }
    }
    out
}

pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let t = gaussian_taps(sigma);
    correlate_axis(&correlate_axis(img, 0, &t), 1, &t)
}

/// Source coordinate for output pixel `dst` under half-pixel-center mapping.
#[inline]
fn src_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
}

/// Interpolation taps `(i0, i1, t)` with value `a + t (b - a)`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|d| {
            let s = src_coord(d, in_len, out_len);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Nearest source index under half-pixel-center mapping.
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64;
    (s.floor() as usize).min(in_len - 1)
}

/// Bilinear resize with half-pixel centers (no corner alignment). Exact on
/// constant inputs.
pub fn resize_bilinear(img: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let a = img[[y0, x0]] as f64;
        let b = img[[y0, x1]] as f64;
        let c = img[[y1, x0]] as f64;
        let d = img[[y1, x1]] as f64;
        let top = a + fx * (b - a);
        let bot = c + fx * (d - c);
        (top + fy * (bot - top)) as f32
    })
}

/// Bilinear resize applied to every channel of an `H x W x k` tensor.
pub fn resize_bilinear3(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, k) = img.dim();
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, k));
    for y in 0..out_h {
        let (y0, y1, fy) = ty[y];
        for x in 0..out_w {
            let (x0, x1, fx) = tx[x];
            for c in 0..k {
                let a = img[[y0, x0, c]] as f64;
                let b = img[[y0, x1, c]] as f64;
                let cc = img[[y1, x0, c]] as f64;
                let d = img[[y1, x1, c]] as f64;
                let top = a + fx * (b - a);
                let bot = cc + fx * (d - cc);
                out[[y, x, c]] = (top + fy * (bot - top)) as f32;
            }
        }
    }
    out
}

pub fn resize_nearest<T: Copy>(img: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        img[[nearest_index(y, h, out_h), nearest_index(x, w, out_w)]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_with_edge_repeat() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn gaussian_preserves_constant_and_ramp() {
        let c = Array2::from_elem((9, 9), 0.25);
        let b = gaussian_blur(&c, 2.0);
        assert!(b.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let ramp = Array2::from_shape_fn((5, 64), |(_, x)| x as f64);
        let d = correlate_axis(&ramp, 1, &gaussian_derivative_taps(2.0));
        // interior slope of a unit ramp is ~1
        assert!((d[[2, 32]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bilinear_exact_on_constants() {
        let c = Array2::from_elem((224, 224), 0.3f32);
        let up = resize_bilinear(&c, 560, 560);
        assert_eq!(up.dim(), (560, 560));
        assert!(up.iter().all(|&v| v == 0.3f32));
    }

    #[test]
    fn nearest_identity_at_same_size() {
        let a = Array2::from_shape_fn((7, 5), |(y, x)| (y * 5 + x) as u8);
        assert_eq!(resize_nearest(&a, 7, 5), a);
        let b = resize_nearest(&a, 14, 10);
        assert_eq!(b[[13, 9]], a[[6, 4]]);
    }
}
