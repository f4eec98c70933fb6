//! DINOv2-style vision transformer backbone.
//!
//! Weight names follow the published HuggingFace checkpoints
//! (`embeddings.*`, `encoder.layer.N.*`, `layernorm.*`), so a downloaded
//! `model.safetensors` loads directly. Grayscale input is replicated to three
//! channels and normalized with the ImageNet mean/std.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedLinear, LayerOpts, LoraConfig};
use super::ops::{gray_to_imagenet, layer_norm, resize_bicubic};
use super::params::{Builder, Ctx, Init};
use super::quant::QuantConfig;
use crate::error::{Error, Result};
use crate::types::{FeatureMap, GraySlice};

pub const PATCH: usize = 14;
/// Cache directory for published checkpoints.
pub const CACHE_ENV: &str = "ROCKSEG_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSize {
    Small,
    Base,
    Large,
}

impl BackboneSize {
    pub const ALL: [BackboneSize; 3] = [BackboneSize::Small, BackboneSize::Base, BackboneSize::Large];

    pub fn name(self) -> &'static str {
        match self {
            BackboneSize::Small => "small",
            BackboneSize::Base => "base",
            BackboneSize::Large => "large",
        }
    }

    pub fn config(self) -> VitConfig {
        let (dim, depth, heads) = match self {
            BackboneSize::Small => (384, 12, 6),
            BackboneSize::Base => (768, 12, 12),
            BackboneSize::Large => (1024, 24, 16),
        };
        VitConfig {
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            pos_grid: 37,
            ln_eps: 1e-6,
        }
    }

    pub fn hf_repo(self) -> String {
        format!("facebook/dinov2-{}", self.name())
    }
}

impl std::str::FromStr for BackboneSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" | "s" => Ok(Self::Small),
            "base" | "b" => Ok(Self::Base),
            "large" | "l" => Ok(Self::Large),
            o => Err(Error::Config(format!("unknown backbone size {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the position-embedding grid stored in the checkpoint.
    pub pos_grid: usize,
    pub ln_eps: f64,
}

impl VitConfig {
    /// Tiny random-weight configuration for tests.
    pub fn stub(dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            pos_grid: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    /// Explicit path; otherwise `$ROCKSEG_CACHE/<default file>`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub url: Option<String>,
    /// Expected SHA-256 of the file, checked when present.
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub size: BackboneSize,
    /// Transformer blocks whose patch tokens are concatenated (0-based).
    pub layers_used: Vec<usize>,
    /// Overrides the published architecture (random-weight stubs).
    #[serde(default)]
    pub custom: Option<VitConfig>,
    #[serde(default)]
    pub checkpoint: Option<CheckpointRef>,
}

impl BackboneSpec {
    /// The last `n` blocks.
    pub fn new(size: BackboneSize, last_n_layers: usize) -> Self {
        let depth = size.config().depth;
        Self {
            size,
            layers_used: (depth - last_n_layers.min(depth)..depth).collect(),
            custom: None,
            checkpoint: None,
        }
    }

    pub fn stub(cfg: VitConfig, last_n_layers: usize) -> Self {
        let depth = cfg.depth;
        Self {
            size: BackboneSize::Small,
            layers_used: (depth - last_n_layers.min(depth)..depth).collect(),
            custom: Some(cfg),
            checkpoint: None,
        }
    }

    pub fn config(&self) -> VitConfig {
        self.custom.clone().unwrap_or_else(|| self.size.config())
    }

    pub fn feature_dim(&self) -> usize {
        self.config().dim
    }

    pub fn concat_dim(&self) -> usize {
        self.layers_used.len() * self.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.config();
        cfg.validate()?;
        if self.layers_used.is_empty() {
            return Err(Error::Config("layers_used must not be empty".into()));
        }
        if let Some(&l) = self.layers_used.iter().find(|&&l| l >= cfg.depth) {
            return Err(Error::Config(format!("layer {l} out of range for depth {}", cfg.depth)));
        }
        Ok(())
    }

    pub fn default_file(&self) -> String {
        format!("dinov2-{}.safetensors", self.size.name())
    }

    /// Resolves the checkpoint path, failing with a download hint when absent.
    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        let url = self
            .checkpoint
            .as_ref()
            .and_then(|c| c.url.clone())
            .unwrap_or_else(|| format!("https://huggingface.co/{}/resolve/main/model.safetensors", self.size.hf_repo()));
        let path = match self.checkpoint.as_ref().and_then(|c| c.path.clone()) {
            Some(p) => p,
            None => cache_dir().join(self.default_file()),
        };
        if !path.is_file() {
            return Err(Error::MissingCheckpoint {
                path: path.clone(),
                hint: format!("download {url} and save it as {}", path.display()),
            });
        }
        if let Some(expected) = self.checkpoint.as_ref().and_then(|c| c.sha256.as_ref()) {
            verify_sha256(&path, expected)?;
        }
        Ok(path)
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".rockseg-cache"))
}

pub fn verify_sha256(path: &Path, expected: &str) -> Result<()> {
    use sha2::{Digest, Sha256};
    let got = hex::encode(Sha256::digest(std::fs::read(path)?));
    if !got.eq_ignore_ascii_case(expected) {
        return Err(Error::Format(format!(
            "{} has sha256 {got}, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads every tensor of a safetensors file, stripping a leading `dinov2.` prefix.
pub fn load_weights(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    let map = candle_core::safetensors::load(path, device)?;
    Ok(map
        .into_iter()
        .map(|(k, v)| (k.strip_prefix("dinov2.").map(str::to_string).unwrap_or(k), v))
        .collect())
}

struct Block {
    norm1: (Tensor, Tensor),
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: AdaptedLinear,
    ls1: Tensor,
    norm2: (Tensor, Tensor),
    fc1: AdaptedLinear,
    fc2: AdaptedLinear,
    ls2: Tensor,
}

pub struct Vit {
    cfg: VitConfig,
    layers_used: Vec<usize>,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: (Tensor, Tensor),
    pos_cache: RefCell<HashMap<(usize, usize), Tensor>>,
}

/// Token outputs of one forward pass.
pub struct VitOutput {
    /// `(B, L*D, gh, gw)` patch features of the used layers, final-normed.
    pub patches: Tensor,
    /// `(B, D)` final-normed class token of the last block.
    pub cls: Tensor,
}

impl Vit {
    /// Builds the backbone; base weights are always frozen (and quantized
    /// when `quant` is enabled), adapters come from `lora`.
    pub fn new(b: &mut Builder, spec: &BackboneSpec, lora: Option<&LoraConfig>, quant: Option<&QuantConfig>) -> Result<Self> {
        spec.validate()?;
        let cfg = spec.config();
        let d = cfg.dim;
        let ln = |b: &mut Builder, name: &str| -> Result<(Tensor, Tensor)> {
            Ok((
                b.frozen(&format!("{name}.weight"), &[d], Init::Ones)?,
                b.frozen(&format!("{name}.bias"), &[d], Init::Zeros)?,
            ))
        };
        let patch_w = b.frozen(
            "embeddings.patch_embeddings.projection.weight",
            &[d, 3, PATCH, PATCH],
            Init::fan_in(3 * PATCH * PATCH),
        )?;
        let patch_b = b.frozen("embeddings.patch_embeddings.projection.bias", &[d], Init::Zeros)?;
        let cls = b.frozen("embeddings.cls_token", &[1, 1, d], Init::Normal(0.02))?;
        let n_pos = cfg.pos_grid * cfg.pos_grid + 1;
        let pos = b.frozen("embeddings.position_embeddings", &[1, n_pos, d], Init::Normal(0.02))?;
        let opts = LayerOpts {
            trainable: false,
            lora,
            quant,
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.layer.{i}");
            let lin = |b: &mut Builder, n: &str, din: usize, dout: usize| {
                AdaptedLinear::new(b, &format!("{p}.{n}"), din, dout, true, opts)
            };
            blocks.push(Block {
                norm1: ln(b, &format!("{p}.norm1"))?,
                q: lin(b, "attention.attention.query", d, d)?,
                k: lin(b, "attention.attention.key", d, d)?,
                v: lin(b, "attention.attention.value", d, d)?,
                o: lin(b, "attention.output.dense", d, d)?,
                ls1: b.frozen(&format!("{p}.layer_scale1.lambda1"), &[d], Init::Const(1.0))?,
                norm2: ln(b, &format!("{p}.norm2"))?,
                fc1: lin(b, "mlp.fc1", d, cfg.mlp_ratio * d)?,
                fc2: lin(b, "mlp.fc2", cfg.mlp_ratio * d, d)?,
                ls2: b.frozen(&format!("{p}.layer_scale2.lambda1"), &[d], Init::Const(1.0))?,
            });
        }
        let norm = ln(b, "layernorm")?;
        Ok(Self {
            cfg,
            layers_used: spec.layers_used.clone(),
            patch_w: patch_w.reshape((d, 3 * PATCH * PATCH))?.t()?.contiguous()?,
            patch_b,
            cls,
            pos,
            blocks,
            norm,
            pos_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn out_dim(&self) -> usize {
        self.layers_used.len() * self.cfg.dim
    }

    /// Token grid for an input of `h x w` pixels.
    pub fn grid(h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::invalid(format!("input {h}x{w} is not divisible by patch size {PATCH}")));
        }
        Ok((h / PATCH, w / PATCH))
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        if let Some(t) = self.pos_cache.borrow().get(&(gh, gw)) {
            return Ok(t.clone());
        }
        let d = self.cfg.dim;
        let g = self.cfg.pos_grid;
        let cls_pos = self.pos.narrow(1, 0, 1)?;
        let t = if (gh, gw) == (g, g) {
            self.pos.clone()
        } else {
            let grid: Vec<f32> = self.pos.narrow(1, 1, g * g)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let out = resize_bicubic(&grid, g, g, d, gh, gw);
            let out = Tensor::from_vec(out, (1, gh * gw, d), self.pos.device())?.to_dtype(self.pos.dtype())?;
            Tensor::cat(&[&cls_pos, &out], 1)?
        };
        self.pos_cache.borrow_mut().insert((gh, gw), t.clone());
        Ok(t)
    }

    fn block_forward(&self, blk: &Block, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (bsz, t, d) = x.dims3()?;
        let nh = self.cfg.heads;
        let hd = d / nh;
        let h = layer_norm(x, &blk.norm1.0, &blk.norm1.1, self.cfg.ln_eps)?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((bsz, t, nh, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(blk.q.forward(&h, ctx)?)?;
        let k = split(blk.k.forward(&h, ctx)?)?;
        let v = split(blk.v.forward(&h, ctx)?)?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let a = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bsz, t, d))?;
        let a = blk.o.forward(&a, ctx)?;
        let x = (x + a.broadcast_mul(&blk.ls1)?)?;
        let h = layer_norm(&x, &blk.norm2.0, &blk.norm2.1, self.cfg.ln_eps)?;
        let m = blk.fc2.forward(&blk.fc1.forward(&h, ctx)?.gelu_erf()?, ctx)?;
        Ok((x + m.broadcast_mul(&blk.ls2)?)?)
    }

    /// Runs the backbone on `(B, 1, H, W)` intensities in `[0, 1]`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<VitOutput> {
        let (bsz, _, h, w) = x.dims4()?;
        let (gh, gw) = Self::grid(h, w)?;
        let d = self.cfg.dim;
        let x = gray_to_imagenet(x)?;
        // patchify: (B, 3, gh, 14, gw, 14) -> (B gh gw, 3*14*14)
        let p = x
            .reshape((bsz, 3, gh, PATCH, gw, PATCH))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((bsz * gh * gw, 3 * PATCH * PATCH))?;
        let tokens = p
            .matmul(&self.patch_w.to_dtype(x.dtype())?)?
            .broadcast_add(&self.patch_b)?
            .reshape((bsz, gh * gw, d))?;
        let cls = self.cls.broadcast_as((bsz, 1, d))?;
        let mut z = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.position_embedding(gh, gw)?)?;
        let mut kept = HashMap::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            z = self.block_forward(blk, &z, ctx)?;
            if self.layers_used.contains(&i) {
                kept.insert(i, z.clone());
            }
        }
        let mut feats = Vec::with_capacity(self.layers_used.len());
        for l in &self.layers_used {
            let n = layer_norm(&kept[l], &self.norm.0, &self.norm.1, self.cfg.ln_eps)?;
            let patches = n.narrow(1, 1, gh * gw)?;
            feats.push(patches.transpose(1, 2)?.reshape((bsz, d, gh, gw))?);
        }
        let patches = Tensor::cat(&feats, 1)?;
        let cls = layer_norm(&z, &self.norm.0, &self.norm.1, self.cfg.ln_eps)?
            .narrow(1, 0, 1)?
            .squeeze(1)?;
        Ok(VitOutput { patches, cls })
    }
}

fn to_input(slice: &GraySlice, dev: &Device) -> Result<Tensor> {
    let (h, w) = slice.dim();
    Ok(Tensor::from_vec(slice.pixels().iter().copied().collect::<Vec<f32>>(), (1, 1, h, w), dev)?)
}

/// Patch features of one slice as a `gh x gw x (L*D)` map (eval mode).
pub fn extract_features(vit: &Vit, slice: &GraySlice, dev: &Device) -> Result<FeatureMap> {
    let out = vit.forward(&to_input(slice, dev)?, &Ctx::eval())?;
    let t = out.patches.squeeze(0)?.permute((1, 2, 0))?.contiguous()?;
    let (gh, gw, c) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    FeatureMap::new(
        ndarray::Array3::from_shape_vec((gh, gw, c), v).expect("gh*gw*c"),
        format!("dinov2-{}x{}", vit.layers_used.len(), vit.cfg.dim),
    )
    .map(|f| f.with_source(slice.id()))
}

/// Global (class-token) embedding of one slice.
pub fn image_embedding(vit: &Vit, slice: &GraySlice, dev: &Device) -> Result<Vec<f32>> {
    let out = vit.forward(&to_input(slice, dev)?, &Ctx::eval())?;
    Ok(out.cls.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> (Vit, Builder<'static>) {
        let mut b = Builder::new(0, &Device::Cpu, DType::F32);
        let spec = BackboneSpec::stub(VitConfig::stub(16, 2, 2), 1);
        (Vit::new(&mut b, &spec, None, None).unwrap(), b)
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(Vit::grid(560, 560).unwrap(), (40, 40));
        assert_eq!(Vit::grid(224, 448).unwrap(), (16, 32));
        assert!(Vit::grid(500, 560).is_err());
    }

    #[test]
    fn stub_forward_shapes_and_determinism() {
        let (vit, _) = stub();
        let s = GraySlice::new(ndarray::Array2::from_shape_fn((56, 42), |(y, x)| ((y + x) % 7) as f32 / 7.0), "t", 0)
            .unwrap();
        let f1 = extract_features(&vit, &s, &Device::Cpu).unwrap();
        let f2 = extract_features(&vit, &s, &Device::Cpu).unwrap();
        assert_eq!(f1.dim(), (4, 3, 16));
        assert_eq!(f1.values(), f2.values());
        assert_eq!(image_embedding(&vit, &s, &Device::Cpu).unwrap().len(), 16);
    }

    #[test]
    fn base_param_counts() {
        let spec = BackboneSpec::new(BackboneSize::Base, 4);
        assert_eq!(spec.concat_dim(), 3072);
        assert_eq!(spec.layers_used, vec![8, 9, 10, 11]);
    }

    #[test]
    fn missing_checkpoint_hint() {
        let mut spec = BackboneSpec::new(BackboneSize::Base, 1);
        spec.checkpoint = Some(CheckpointRef {
            path: Some("/nonexistent/dinov2.safetensors".into()),
            url: None,
            sha256: None,
        });
        match spec.checkpoint_path() {
            Err(Error::MissingCheckpoint { hint, .. }) => assert!(hint.contains("huggingface.co/facebook/dinov2-base")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
