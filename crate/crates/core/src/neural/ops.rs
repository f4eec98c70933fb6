//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::preprocess::filters::linear_taps;
use crate::types::{GraySlice, LabelMask};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Replicates a `(B, 1, H, W)` grayscale batch to RGB and applies the ImageNet normalization.
pub fn gray_to_imagenet(x: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::shape("1 input channel", c));
    }
    let dev = x.device();
    let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(x.dtype())?;
    let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(x.dtype())?;
    Ok(x.broadcast_as((bsz, 3, h, w))?.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

/// Layer norm over the last dimension.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(weight)?.broadcast_add(bias)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// `out x in` bilinear interpolation matrix with half-pixel centers.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (o, (i0, i1, t)) in linear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + i0] += 1.0 - t;
        m[o * in_len + i1] += t;
    }
    m
}

fn matrix_t(in_len: usize, out_len: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    // stored transposed: in x out
    let m = bilinear_matrix(in_len, out_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), dev)?.t()?.contiguous()?.to_dtype(dtype)?)
}

/// Bilinear resize of `(B, C, H, W)` as two matrix products, so gradients flow.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rw = matrix_t(w, out_w, x.dtype(), x.device())?;
    let rh = matrix_t(h, out_h, x.dtype(), x.device())?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rw)?; // (bch, ow)
    let y = y.reshape((b, c, h, out_w))?.transpose(2, 3)?.contiguous()?;
    let y = y.reshape((b * c * out_w, h))?.matmul(&rh)?; // (bc ow, oh)
    Ok(y.reshape((b, c, out_w, out_h))?.transpose(2, 3)?.contiguous()?)
}

fn cubic(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
        } else if x < 2.0 {
            ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
        } else {
            0.0
        }
    };
    [w(t + 1.0), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Bicubic resize (a = -0.75, half-pixel centers, clamped borders) of an
/// `H x W x C` grid stored row-major.
pub fn resize_bicubic(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let taps = |in_len: usize, out_len: usize| -> Vec<([usize; 4], [f64; 4])> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = (o as f64 + 0.5) * scale - 0.5;
                let f = s.floor();
                let idx = [-1isize, 0, 1, 2].map(|d| (f as isize + d).clamp(0, in_len as isize - 1) as usize);
                (idx, cubic(s - f))
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0f32; oh * ow * c];
    for (oy, (iy, wy)) in ty.iter().enumerate() {
        for (ox, (ix, wx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += wy[a] * wx[b] * src[(iy[a] * w + ix[b]) * c + ch] as f64;
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc as f32;
            }
        }
    }
    out
}

/// Stacks slices into a `(B, 1, H, W)` tensor.
pub fn slices_to_tensor(slices: &[&GraySlice], dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = slices
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut v: Vec<f32> = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.dim() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", s.dim())));
        }
        v.extend(s.pixels().iter());
    }
    Ok(Tensor::from_vec(v, (slices.len(), 1, h, w), dev)?.to_dtype(dtype)?)
}

/// Stacks masks into a `(B, H, W)` u32 tensor.
pub fn masks_to_tensor(masks: &[&LabelMask], dev: &Device) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut v = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", m.dim())));
        }
        v.extend(m.labels().iter().map(|&l| l as u32));
    }
    Ok(Tensor::from_vec(v, (masks.len(), h, w), dev)?)
}

/// Mean pixelwise cross-entropy of `(B, C, H, W)` logits against `(B, H, W)`
/// labels, optionally class-weighted (weighted mean).
pub fn cross_entropy(logits: &Tensor, labels: &Tensor, class_weights: Option<&[f64]>) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::shape(format!("[{b}, {h}, {w}]"), format!("{:?}", labels.dims())));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let idx = labels.unsqueeze(1)?;
    let nll = logp.gather(&idx, 1)?.squeeze(1)?.neg()?; // (b, h, w)
    match class_weights {
        None => Ok(nll.mean_all()?),
        Some(cw) => {
            if cw.len() != c {
                return Err(Error::shape(c, cw.len()));
            }
            let wt = Tensor::from_vec(cw.to_vec(), c, logits.device())?.to_dtype(logits.dtype())?;
            let pw = wt.index_select(&labels.flatten_all()?, 0)?.reshape((b, h, w))?;
            Ok((nll.mul(&pw)?.sum_all()? / pw.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)?)
        }
    }
}

/// Per-pixel argmax of `(B, C, H, W)` logits as `B` label grids.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<ndarray::Array2<u8>>> {
    let (b, _, h, w) = logits.dims4()?;
    let am: Vec<u32> = logits.argmax(1)?.flatten_all()?.to_vec1()?;
    Ok(am
        .chunks(h * w)
        .take(b)
        .map(|c| ndarray::Array2::from_shape_vec((h, w), c.iter().map(|&v| v as u8).collect()).expect("h*w"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_tensor_matches_array_resize() {
        let a = ndarray::Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32 / 35.0);
        let t = Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, 1, 5, 7), &Device::Cpu).unwrap();
        let r = resize_bilinear(&t, 9, 4).unwrap();
        let got: Vec<f32> = r.flatten_all().unwrap().to_vec1().unwrap();
        let want = crate::preprocess::filters::resize_bilinear(&a, 9, 4);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_keeps_constants() {
        let src = vec![0.25f32; 3 * 3 * 2];
        let out = resize_bicubic(&src, 3, 3, 2, 5, 4);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let same = resize_bicubic(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 2, 2);
        assert_eq!(same, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros((1, 4, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let labels = Tensor::zeros((1, 2, 2), DType::U32, &Device::Cpu).unwrap();
        let l: f32 = cross_entropy(&logits, &labels, None).unwrap().to_scalar().unwrap();
        assert!((l as f64 - 4f64.ln()).abs() < 1e-6);
        let lw: f32 = cross_entropy(&logits, &labels, Some(&[2.0, 1.0, 1.0, 1.0]))
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!((lw as f64 - 4f64.ln()).abs() < 1e-6);
    }
}
