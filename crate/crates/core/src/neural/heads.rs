//! Segmentation heads on `(B, D, h, w)` feature grids.
//!
//! The linear head is a per-pixel affine map followed by bilinear upsampling.
//! The conv head reduces to 512 channels with a 3x3 conv, then runs four
//! decoder stages, each a bilinear upsample and a 3x3 same-padding conv, at
//! 1/7, 2/7, 4/7 and 7/7 of the output size (80, 160, 320, 560 for 560).
//! LeakyReLU follows every conv but the last; dropout follows every second conv.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedConv, ConvGeom, LayerOpts};
use super::ops::{leaky_relu, resize_bilinear};
use super::params::{Builder, Ctx, Init};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Conv,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "conv" => Ok(Self::Conv),
            o => Err(Error::Config(format!("unknown head {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub n_classes: usize,
    /// Output side length; logits are `out_size x out_size`.
    #[serde(default = "default_out")]
    pub out_size: usize,
    #[serde(default = "default_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_out() -> usize {
    560
}
fn default_channels() -> Vec<usize> {
    vec![512, 256, 128, 64]
}
fn default_dropout() -> f64 {
    0.1
}
fn default_slope() -> f64 {
    0.01
}

impl HeadSpec {
    pub fn new(kind: HeadKind, n_classes: usize) -> Self {
        Self {
            kind,
            n_classes,
            out_size: default_out(),
            conv_channels: default_channels(),
            dropout: default_dropout(),
            leaky_slope: default_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("head needs at least 2 classes".into()));
        }
        if self.out_size < 7 {
            return Err(Error::Config("head out_size must be >= 7".into()));
        }
        if self.kind == HeadKind::Conv && self.conv_channels.len() != 4 {
            return Err(Error::Config("conv head needs exactly 4 channel widths".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("head dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Decoder stage sizes of the conv head.
    pub fn stage_sizes(&self) -> [usize; 4] {
        let s = self.out_size;
        [s / 7, 2 * s / 7, 4 * s / 7, s]
    }

    /// Parameters of a head on `d_in` input channels.
    pub fn n_params(&self, d_in: usize) -> usize {
        match self.kind {
            HeadKind::Linear => (d_in + 1) * self.n_classes,
            HeadKind::Conv => {
                let c = &self.conv_channels;
                let conv = |i: usize, o: usize| i * o * 9 + o;
                conv(d_in, c[0]) + conv(c[0], c[1]) + conv(c[1], c[2]) + conv(c[2], c[3]) + conv(c[3], self.n_classes)
            }
        }
    }
}

pub struct LinearHead {
    weight: Tensor,
    bias: Tensor,
    d_in: usize,
    spec: HeadSpec,
}

impl LinearHead {
    pub fn new(b: &mut Builder, prefix: &str, d_in: usize, spec: &HeadSpec) -> Result<Self> {
        Ok(Self {
            weight: b.trainable(&format!("{prefix}.weight"), &[spec.n_classes, d_in], Init::fan_in(d_in))?,
            bias: b.trainable(&format!("{prefix}.bias"), &[spec.n_classes], Init::Zeros)?,
            d_in,
            spec: spec.clone(),
        })
    }

    /// Logits on the feature grid, before upsampling.
    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        let (bsz, d, h, w) = f.dims4()?;
        if d != self.d_in {
            return Err(Error::shape(format!("{} feature channels", self.d_in), d));
        }
        let n = self.spec.n_classes;
        let x = f.permute((0, 2, 3, 1))?.contiguous()?.reshape((bsz * h * w, d))?;
        let y = x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((bsz, h, w, n))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        resize_bilinear(&self.project(f)?, self.spec.out_size, self.spec.out_size)
    }
}

pub struct ConvHead {
    convs: Vec<AdaptedConv>,
    d_in: usize,
    spec: HeadSpec,
}

impl ConvHead {
    pub fn new(b: &mut Builder, prefix: &str, d_in: usize, spec: &HeadSpec) -> Result<Self> {
        let c = &spec.conv_channels;
        let widths = [d_in, c[0], c[1], c[2], c[3], spec.n_classes];
        let opts = LayerOpts {
            trainable: true,
            ..Default::default()
        };
        let convs = (0..5)
            .map(|i| {
                let geom = ConvGeom {
                    c_in: widths[i],
                    c_out: widths[i + 1],
                    k: 3,
                    stride: 1,
                    padding: 1,
                };
                AdaptedConv::new(b, &format!("{prefix}.convs.{i}"), geom, true, opts)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            d_in,
            spec: spec.clone(),
        })
    }

    pub fn forward(&self, f: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let d = f.dim(1)?;
        if d != self.d_in {
            return Err(Error::shape(format!("{} feature channels", self.d_in), d));
        }
        let slope = self.spec.leaky_slope;
        let mut x = leaky_relu(&self.convs[0].forward(f, ctx)?, slope)?;
        for (i, &s) in self.spec.stage_sizes().iter().enumerate() {
            x = resize_bilinear(&x, s, s)?;
            x = self.convs[i + 1].forward(&x, ctx)?;
            if i < 3 {
                x = leaky_relu(&x, slope)?;
                // convs 2 and 4 (1-based) are followed by dropout
                if i % 2 == 0 {
                    x = ctx.dropout(&x, self.spec.dropout)?;
                }
            }
        }
        Ok(x)
    }
}

pub enum Head {
    Linear(LinearHead),
    Conv(ConvHead),
}

impl Head {
    pub fn new(b: &mut Builder, prefix: &str, d_in: usize, spec: &HeadSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            HeadKind::Linear => Head::Linear(LinearHead::new(b, prefix, d_in, spec)?),
            HeadKind::Conv => Head::Conv(ConvHead::new(b, prefix, d_in, spec)?),
        })
    }

    pub fn forward(&self, f: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Head::Linear(h) => h.forward(f),
            Head::Conv(h) => h.forward(f, ctx),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn linear_head_zero_weights_gives_bias() {
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        let mut spec = HeadSpec::new(HeadKind::Linear, 3);
        spec.out_size = 14;
        let h = LinearHead::new(&mut b, "head", 5, &spec).unwrap();
        b.params.trainable["head.weight"].set(&Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap()).unwrap();
        b.params.trainable["head.bias"]
            .set(&Tensor::new(&[0.5f32, -1.0, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        let f = b.init(&[2, 5, 2, 2], Init::Normal(1.0)).unwrap();
        let y = h.forward(&f).unwrap();
        assert_eq!(y.dims(), &[2, 3, 14, 14]);
        let v: Vec<f32> = y.narrow(1, 2, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-6));
        assert_eq!(b.params.n_trainable(), spec.n_params(5));
    }

    #[test]
    fn conv_head_small_shape_and_count() {
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        let mut spec = HeadSpec::new(HeadKind::Conv, 3);
        spec.out_size = 28;
        spec.conv_channels = vec![8, 6, 4, 2];
        let h = ConvHead::new(&mut b, "head", 5, &spec).unwrap();
        let f = b.init(&[1, 5, 2, 2], Init::Normal(1.0)).unwrap();
        let y = h.forward(&f, &Ctx::eval()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 28, 28]);
        assert_eq!(spec.stage_sizes(), [4, 8, 16, 28]);
        assert_eq!(b.params.n_trainable(), spec.n_params(5));
        assert!(h.forward(&b.init(&[1, 4, 2, 2], Init::Zeros).unwrap(), &Ctx::eval()).is_err());
    }
}
