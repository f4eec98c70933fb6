//! Convolutional baselines: UNet and a ResNet152 encoder.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedConv, ConvGeom, LayerOpts, LoraConfig};
use super::ops::gray_to_imagenet;
use super::params::{Builder, Ctx, Init};
use super::quant::QuantConfig;
use crate::error::{Error, Result};

/// Batch norm; with `track` it uses batch statistics in training and
/// updates the running estimates, otherwise it always uses the running ones.
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    mean: Var,
    var: Var,
    track: bool,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, c: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.weight"), &[c], Init::Ones, trainable)?,
            bias: b.param(&format!("{name}.bias"), &[c], Init::Zeros, trainable)?,
            mean: b.buffer(&format!("{name}.running_mean"), &[c], Init::Zeros)?,
            var: b.buffer(&format!("{name}.running_var"), &[c], Init::Ones)?,
            track: trainable,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if ctx.train && self.track {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let n = (x.elem_count() / c) as f64;
            let unbiased = (var.detach() * (n / (n - 1.0).max(1.0)))?.reshape(c)?;
            let m = self.momentum;
            self.mean
                .set(&((self.mean.as_tensor() * (1.0 - m))? + (mean.detach().reshape(c)? * m)?)?)?;
            self.var.set(&((self.var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.mean.as_tensor().reshape(shape)?,
                self.var.as_tensor().reshape(shape)?,
            )
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

fn geom(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> ConvGeom {
    ConvGeom {
        c_in,
        c_out,
        k,
        stride,
        padding,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnetSize {
    Small,
    Large,
}

impl UnetSize {
    /// Channels of the first level; each level doubles.
    pub fn base_width(self) -> usize {
        match self {
            UnetSize::Small => 32,
            UnetSize::Large => 64,
        }
    }
}

struct DoubleConv {
    c1: AdaptedConv,
    b1: BatchNorm,
    c2: AdaptedConv,
    b2: BatchNorm,
}

impl DoubleConv {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let opts = LayerOpts {
            trainable: true,
            ..Default::default()
        };
        let p = format!("{name}.double_conv");
        Ok(Self {
            c1: AdaptedConv::new(b, &format!("{p}.0"), geom(c_in, c_out, 3, 1, 1), false, opts)?,
            b1: BatchNorm::new(b, &format!("{p}.1"), c_out, true)?,
            c2: AdaptedConv::new(b, &format!("{p}.3"), geom(c_out, c_out, 3, 1, 1), false, opts)?,
            b2: BatchNorm::new(b, &format!("{p}.4"), c_out, true)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = self.b1.forward(&self.c1.forward(x, ctx)?, ctx)?.relu()?;
        Ok(self.b2.forward(&self.c2.forward(&x, ctx)?, ctx)?.relu()?)
    }
}

struct Up {
    up_w: Tensor,
    up_b: Tensor,
    conv: DoubleConv,
}

/// Four-level UNet with batch norm, max-pool down path and transposed-conv up path.
pub struct Unet {
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<Up>,
    out_w: Tensor,
    out_b: Tensor,
}

impl Unet {
    pub fn new(b: &mut Builder, size: UnetSize, n_classes: usize) -> Result<Self> {
        let w = size.base_width();
        let ch = [w, 2 * w, 4 * w, 8 * w, 16 * w];
        let inc = DoubleConv::new(b, "inc", 1, ch[0])?;
        let downs = (0..4)
            .map(|i| DoubleConv::new(b, &format!("down{}.maxpool_conv.1", i + 1), ch[i], ch[i + 1]))
            .collect::<Result<_>>()?;
        let ups = (0..4)
            .map(|i| {
                let (hi, lo) = (ch[4 - i], ch[3 - i]);
                let name = format!("up{}", i + 1);
                Ok(Up {
                    up_w: b.trainable(&format!("{name}.up.weight"), &[hi, lo, 2, 2], Init::fan_in(lo * 4))?,
                    up_b: b.trainable(&format!("{name}.up.bias"), &[lo], Init::Zeros)?,
                    conv: DoubleConv::new(b, &format!("{name}.conv"), hi, lo)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            inc,
            downs,
            ups,
            out_w: b.trainable("outc.conv.weight", &[n_classes, ch[0], 1, 1], Init::fan_in(ch[0]))?,
            out_b: b.trainable("outc.conv.bias", &[n_classes], Init::Zeros)?,
        })
    }

    /// `(B, 1, H, W)` in, `(B, n_classes, H, W)` logits out; `H, W` divisible by 16.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape("1 input channel", c));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!("UNet input {h}x{w} must be divisible by 16")));
        }
        let mut skips = vec![self.inc.forward(x, ctx)?];
        for d in &self.downs {
            let prev = skips.last().expect("non-empty").max_pool2d(2)?;
            skips.push(d.forward(&prev, ctx)?);
        }
        let mut y = skips.pop().expect("bottom");
        for u in &self.ups {
            let c = u.up_b.dim(0)?;
            let up = y
                .conv_transpose2d(&u.up_w, 0, 0, 2, 1)?
                .broadcast_add(&u.up_b.reshape((1, c, 1, 1))?)?;
            let skip = skips.pop().expect("matching skip");
            y = u.conv.forward(&Tensor::cat(&[&skip, &up], 1)?, ctx)?;
        }
        let n = self.out_b.dim(0)?;
        Ok(y.conv2d(&self.out_w, 0, 1, 1, 1)?
            .broadcast_add(&self.out_b.reshape((1, n, 1, 1))?)?)
    }
}

struct Bottleneck {
    convs: [AdaptedConv; 3],
    bns: [BatchNorm; 3],
    down: Option<(AdaptedConv, BatchNorm)>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = x.clone();
        for i in 0..3 {
            y = self.bns[i].forward(&self.convs[i].forward(&y, ctx)?, ctx)?;
            if i < 2 {
                y = y.relu()?;
            }
        }
        let id = match &self.down {
            Some((c, bn)) => bn.forward(&c.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + id)?.relu()?)
    }
}

pub const RESNET152_BLOCKS: [usize; 4] = [3, 8, 36, 3];
pub const RESNET_OUT_DIM: usize = 2048;

/// ResNet152 feature encoder (torchvision weight names, no classifier).
/// Base weights and batch norms are frozen; adapters wrap every conv in the
/// four residual stages, the stem stays unadapted.
pub struct ResNet {
    stem: AdaptedConv,
    stem_bn: BatchNorm,
    blocks: Vec<Bottleneck>,
}

impl ResNet {
    pub fn resnet152(b: &mut Builder, lora: Option<&LoraConfig>, quant: Option<&QuantConfig>) -> Result<Self> {
        let frozen = LayerOpts {
            trainable: false,
            lora: None,
            quant,
        };
        let adapted = LayerOpts {
            trainable: false,
            lora,
            quant,
        };
        let stem = AdaptedConv::new(b, "conv1", geom(3, 64, 7, 2, 3), false, frozen)?;
        let stem_bn = BatchNorm::new(b, "bn1", 64, false)?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (li, &n) in RESNET152_BLOCKS.iter().enumerate() {
            let width = 64 << li;
            let out = width * 4;
            for bi in 0..n {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let p = format!("layer{}.{bi}", li + 1);
                let conv = |b: &mut Builder, i: usize, g: ConvGeom| AdaptedConv::new(b, &format!("{p}.conv{i}"), g, false, adapted);
                let bn = |b: &mut Builder, i: usize, c: usize| BatchNorm::new(b, &format!("{p}.bn{i}"), c, false);
                let convs = [
                    conv(b, 1, geom(c_in, width, 1, 1, 0))?,
                    conv(b, 2, geom(width, width, 3, stride, 1))?,
                    conv(b, 3, geom(width, out, 1, 1, 0))?,
                ];
                let bns = [bn(b, 1, width)?, bn(b, 2, width)?, bn(b, 3, out)?];
                let down = if bi == 0 {
                    Some((
                        AdaptedConv::new(b, &format!("{p}.downsample.0"), geom(c_in, out, 1, stride, 0), false, adapted)?,
                        BatchNorm::new(b, &format!("{p}.downsample.1"), out, false)?,
                    ))
                } else {
                    None
                };
                blocks.push(Bottleneck { convs, bns, down });
                c_in = out;
            }
        }
        Ok(Self { stem, stem_bn, blocks })
    }

    /// `(B, 1, H, W)` intensities to `(B, 2048, H/32, W/32)` (rounded up) features.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = gray_to_imagenet(x)?;
        let y = self.stem_bn.forward(&self.stem.forward(&x, ctx)?, ctx)?.relu()?;
        // 3x3/2 max pool with padding 1; zero padding is exact after ReLU
        let y = y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let (_, _, h, w) = y.dims4()?;
        let mut y = y.max_pool2d_with_stride(3, 2)?;
        debug_assert_eq!(y.dim(2)?, (h - 3) / 2 + 1);
        let _ = w;
        for blk in &self.blocks {
            y = blk.forward(&y, ctx)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn unet_param_counts() {
        let dev = Device::Cpu;
        let mut b = Builder::new(0, &dev, DType::F32);
        Unet::new(&mut b, UnetSize::Small, 3).unwrap();
        let small = b.params.n_trainable();
        let mut b = Builder::new(0, &dev, DType::F32);
        Unet::new(&mut b, UnetSize::Large, 3).unwrap();
        let large = b.params.n_trainable();
        assert!((small as f64 / 7.8e6 - 1.0).abs() < 0.1, "{small}");
        assert!((large as f64 / 31.3e6 - 1.0).abs() < 0.1, "{large}");
    }

    #[test]
    fn unet_small_input_shape() {
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        let u = Unet::new(&mut b, UnetSize::Small, 3).unwrap();
        let x = b.init(&[1, 1, 32, 48], Init::Uniform(1.0)).unwrap();
        assert_eq!(u.forward(&x, &Ctx::eval()).unwrap().dims(), &[1, 3, 32, 48]);
        assert!(u.forward(&b.init(&[1, 1, 30, 32], Init::Zeros).unwrap(), &Ctx::eval()).is_err());
    }

    #[test]
    fn resnet152_counts() {
        let lora = LoraConfig {
            rank: 8,
            ..Default::default()
        };
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        ResNet::resnet152(&mut b, Some(&lora), None).unwrap();
        // torchvision resnet152 has 60,192,808 parameters, 2,049,000 in the classifier
        let frozen = b.params.n_frozen();
        assert_eq!(frozen, 60_192_808 - 2_049_000);
        // adapters: r*(c_in*k*k) + c_out*r for every conv outside the stem
        let mut want = 0;
        let mut c_in = 64;
        for (li, &n) in RESNET152_BLOCKS.iter().enumerate() {
            let w = 64 << li;
            for bi in 0..n {
                want += 8 * c_in + w * 8 + 8 * w * 9 + w * 8 + 8 * w + 4 * w * 8;
                if bi == 0 {
                    want += 8 * c_in + 4 * w * 8;
                }
                c_in = 4 * w;
            }
        }
        assert_eq!(b.params.n_trainable(), want);
    }

    #[test]
    fn batchnorm_train_uses_batch_stats() {
        let mut b = Builder::new(0, &Device::Cpu, DType::F64);
        let bn = BatchNorm::new(&mut b, "bn", 2, true).unwrap();
        let x = b.init(&[4, 2, 3, 3], Init::Normal(3.0)).unwrap();
        let y = bn.forward(&x, &Ctx::train(0)).unwrap();
        let m: f64 = y.mean_all().unwrap().to_scalar().unwrap();
        assert!(m.abs() < 1e-9);
        let rm: Vec<f64> = b.params.buffers["bn.running_mean"].to_vec1().unwrap();
        assert!(rm.iter().any(|v| v.abs() > 0.0));
    }
}
