//! Low-rank adapters on frozen (optionally quantized) linear and conv layers.
//!
//! An adapted linear layer computes `W x + b + (alpha / r) B A x` with `A`
//! (`r x in`) randomly initialized and `B` (`out x r`) zero, so a fresh
//! adapter leaves the output unchanged. Conv adapters use a `k x k` conv
//! for `A` and a `1 x 1` conv for `B`.

use std::sync::Arc;

use candle_core::Tensor;
use log::warn;
use serde::{Deserialize, Serialize};

use super::params::{Builder, Ctx, Init};
use super::quant::{QuantConfig, QuantizedTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    /// Rank; 0 disables the adapters.
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lora dropout must be in [0, 1)".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora alpha must be finite".into()));
        }
        Ok(())
    }

    /// Trainable parameters added to one `d_out x d_in` linear layer.
    pub fn added_params(&self, d_in: usize, d_out: usize) -> usize {
        self.rank * (d_in + d_out)
    }
}

#[derive(Debug, Clone)]
pub enum BaseWeight {
    Full(Tensor),
    Quantized(Arc<QuantizedTensor>),
}

impl BaseWeight {
    pub fn tensor(&self, like: &Tensor) -> Result<Tensor> {
        match self {
            BaseWeight::Full(t) => Ok(t.clone()),
            BaseWeight::Quantized(q) => Ok(q.to_tensor(like.device())?.to_dtype(like.dtype())?),
        }
    }
}

fn base_weight(
    b: &mut Builder,
    name: &str,
    shape: &[usize],
    init: Init,
    trainable: bool,
    quant: Option<&QuantConfig>,
) -> Result<BaseWeight> {
    match quant {
        Some(q) if q.enabled && !trainable => Ok(BaseWeight::Quantized(b.quantized(name, shape, init, q.block_size)?)),
        _ => Ok(BaseWeight::Full(b.param(name, shape, init, trainable)?)),
    }
}

#[derive(Debug, Clone)]
struct Adapter {
    a: Tensor,
    b: Tensor,
    scale: f64,
    dropout: f64,
}

/// Linear layer (`weight` is `out x in`) with an optional adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    weight: BaseWeight,
    bias: Option<Tensor>,
    adapter: Option<Adapter>,
    pub d_in: usize,
    pub d_out: usize,
}

/// How a layer's base weights are held.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerOpts<'a> {
    pub trainable: bool,
    pub lora: Option<&'a LoraConfig>,
    pub quant: Option<&'a QuantConfig>,
}

impl AdaptedLinear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, bias: bool, opts: LayerOpts) -> Result<Self> {
        let init = Init::fan_in(d_in);
        let weight = base_weight(b, &format!("{name}.weight"), &[d_out, d_in], init, opts.trainable, opts.quant)?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), &[d_out], init, opts.trainable)?)
        } else {
            None
        };
        let adapter = match opts.lora {
            Some(l) if l.rank > 0 => {
                if l.rank > d_in.min(d_out) {
                    warn!("{name}: lora rank {} exceeds min(d_in, d_out) = {}", l.rank, d_in.min(d_out));
                }
                Some(Adapter {
                    a: b.trainable(&format!("{name}.lora_A.weight"), &[l.rank, d_in], init)?,
                    b: b.trainable(&format!("{name}.lora_B.weight"), &[d_out, l.rank], Init::Zeros)?,
                    scale: l.scale(),
                    dropout: l.dropout,
                })
            }
            _ => None,
        };
        Ok(Self {
            weight,
            bias,
            adapter,
            d_in,
            d_out,
        })
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    fn flat(x: &Tensor, d_in: usize) -> Result<(Tensor, Vec<usize>)> {
        let dims = x.dims().to_vec();
        if dims.last() != Some(&d_in) {
            return Err(Error::shape(format!("last dim {d_in}"), format!("{dims:?}")));
        }
        let rows = x.elem_count() / d_in;
        Ok((x.reshape((rows, d_in))?, dims))
    }

    fn affine(&self, x2: &Tensor, w: &Tensor) -> Result<Tensor> {
        let y = x2.matmul(&w.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (x2, mut dims) = Self::flat(x, self.d_in)?;
        let w = self.weight.tensor(x)?;
        let mut y = self.affine(&x2, &w)?;
        if let Some(ad) = &self.adapter {
            let xd = ctx.dropout(&x2, ad.dropout)?;
            let low = xd.matmul(&ad.a.t()?)?.matmul(&ad.b.t()?)?;
            y = (y + (low * ad.scale)?)?;
        }
        *dims.last_mut().expect("non-empty") = self.d_out;
        Ok(y.reshape(dims)?)
    }

    /// `W + scale B A`.
    pub fn merged_weight(&self, like: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor(like)?;
        match &self.adapter {
            Some(ad) => Ok((w + (ad.b.matmul(&ad.a)? * ad.scale)?)?),
            None => Ok(w),
        }
    }

    /// Forward with the adapter folded into the weight.
    pub fn forward_merged(&self, x: &Tensor) -> Result<Tensor> {
        let (x2, mut dims) = Self::flat(x, self.d_in)?;
        let y = self.affine(&x2, &self.merged_weight(x)?)?;
        *dims.last_mut().expect("non-empty") = self.d_out;
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

/// 2D convolution with an optional conv adapter.
#[derive(Debug, Clone)]
pub struct AdaptedConv {
    weight: BaseWeight,
    bias: Option<Tensor>,
    adapter: Option<Adapter>,
    pub geom: ConvGeom,
}

impl AdaptedConv {
    pub fn new(b: &mut Builder, name: &str, geom: ConvGeom, bias: bool, opts: LayerOpts) -> Result<Self> {
        let fan_in = geom.c_in * geom.k * geom.k;
        let init = if opts.trainable { Init::kaiming(fan_in) } else { Init::fan_in(fan_in) };
        let weight = base_weight(
            b,
            &format!("{name}.weight"),
            &[geom.c_out, geom.c_in, geom.k, geom.k],
            init,
            opts.trainable,
            opts.quant,
        )?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), &[geom.c_out], Init::Zeros, opts.trainable)?)
        } else {
            None
        };
        let adapter = match opts.lora {
            Some(l) if l.rank > 0 => Some(Adapter {
                a: b.trainable(
                    &format!("{name}.lora_A.weight"),
                    &[l.rank, geom.c_in, geom.k, geom.k],
                    Init::fan_in(fan_in),
                )?,
                b: b.trainable(&format!("{name}.lora_B.weight"), &[geom.c_out, l.rank, 1, 1], Init::Zeros)?,
                scale: l.scale(),
                dropout: l.dropout,
            }),
            _ => None,
        };
        Ok(Self {
            weight,
            bias,
            adapter,
            geom,
        })
    }

    fn conv(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(w, self.geom.padding, self.geom.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.geom.c_out, 1, 1))?)?,
            None => y,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = self.conv(x, &self.weight.tensor(x)?)?;
        if let Some(ad) = &self.adapter {
            let xd = ctx.dropout(x, ad.dropout)?;
            let low = xd
                .conv2d(&ad.a, self.geom.padding, self.geom.stride, 1, 1)?
                .conv2d(&ad.b, 0, 1, 1, 1)?;
            y = (y + (low * ad.scale)?)?;
        }
        Ok(y)
    }

    pub fn merged_weight(&self, like: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor(like)?;
        match &self.adapter {
            Some(ad) => {
                let g = &self.geom;
                let r = ad.a.dim(0)?;
                let a = ad.a.reshape((r, g.c_in * g.k * g.k))?;
                let bm = ad.b.reshape((g.c_out, r))?;
                let delta = bm.matmul(&a)?.reshape((g.c_out, g.c_in, g.k, g.k))?;
                Ok((w + (delta * ad.scale)?)?)
            }
            None => Ok(w),
        }
    }

    pub fn forward_merged(&self, x: &Tensor) -> Result<Tensor> {
        self.conv(x, &self.merged_weight(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn rand_input(b: &mut Builder, shape: &[usize]) -> Tensor {
        b.init(shape, Init::Normal(1.0)).unwrap()
    }

    #[test]
    fn adds_rank_times_in_plus_out() {
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        let lora = LoraConfig::default();
        AdaptedLinear::new(
            &mut b,
            "l",
            768,
            768,
            true,
            LayerOpts {
                lora: Some(&lora),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(b.params.n_trainable(), 49_152);
        assert_eq!(lora.added_params(768, 768), 49_152);
    }

    #[test]
    fn fresh_adapter_is_identity_and_merge_matches() {
        let mut b = Builder::new(1, &Device::Cpu, DType::F32);
        let lora = LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        };
        let opts = LayerOpts {
            lora: Some(&lora),
            ..Default::default()
        };
        let l = AdaptedLinear::new(&mut b, "l", 16, 12, true, opts).unwrap();
        let x = rand_input(&mut b, &[3, 5, 16]);
        let ctx = Ctx::eval();
        let y0 = l.forward(&x, &ctx).unwrap();
        // perturb B so the adapter contributes
        let nb = b.init(&[12, 4], Init::Normal(0.5)).unwrap();
        b.params.trainable["l.lora_B.weight"].set(&nb).unwrap();
        let y1 = l.forward(&x, &ctx).unwrap();
        let ym = l.forward_merged(&x).unwrap();
        let d: f32 = (y1.clone() - ym).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-4);
        let moved: f32 = (y1 - y0).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(moved > 1e-3);
    }

    #[test]
    fn conv_adapter_merge_matches() {
        let mut b = Builder::new(2, &Device::Cpu, DType::F64);
        let lora = LoraConfig {
            rank: 2,
            alpha: 2.0,
            dropout: 0.0,
        };
        let geom = ConvGeom {
            c_in: 3,
            c_out: 5,
            k: 3,
            stride: 2,
            padding: 1,
        };
        let opts = LayerOpts {
            lora: Some(&lora),
            ..Default::default()
        };
        let c = AdaptedConv::new(&mut b, "c", geom, false, opts).unwrap();
        let nb = b.init(&[5, 2, 1, 1], Init::Normal(1.0)).unwrap();
        b.params.trainable["c.lora_B.weight"].set(&nb).unwrap();
        let x = rand_input(&mut b, &[2, 3, 9, 9]);
        let y = c.forward(&x, &Ctx::eval()).unwrap();
        let ym = c.forward_merged(&x).unwrap();
        let d: f64 = (y - ym).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-10);
    }

    #[test]
    fn rank_zero_is_frozen_model() {
        let mut b = Builder::new(3, &Device::Cpu, DType::F32);
        let lora = LoraConfig {
            rank: 0,
            ..Default::default()
        };
        let opts = LayerOpts {
            lora: Some(&lora),
            ..Default::default()
        };
        let l = AdaptedLinear::new(&mut b, "l", 8, 8, true, opts).unwrap();
        assert!(!l.has_adapter());
        assert_eq!(b.params.n_trainable(), 0);
    }
}
