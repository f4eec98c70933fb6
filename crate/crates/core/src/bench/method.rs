//! Uniform fit/predict interface over every segmentation method.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::classical::{segment, ClassOrderMapping, ClassicalConfig, ClassicalMethod};
use crate::error::{Error, Result};
use crate::neural::vit::load_weights;
use crate::neural::{
    save_checkpoint, train_segmenter, BackboneSpec, Builder, HeadKind, LinearProbe, LinearProbeConfig,
    ModelSpec, SegModel, TrainConfig, TrainHistory, Vit,
};
use crate::preprocess::filters::resize_nearest;
use crate::preprocess::{augment, bfe, nl_means_with, AugmentConfig, BfeConfig, NlMeansConfig};
use crate::shallow::{rf_predict, rf_train, KnnConfig, KnnProbe, RfConfig, RfModel};
use crate::types::{ClassPalette, FeatureMap, GraySlice, LabelMask};

/// Where pixel features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSource {
    Bfe {
        #[serde(default)]
        config: BfeConfig,
        /// NL-means before feature extraction.
        #[serde(default)]
        denoise: Option<NlMeansConfig>,
    },
    Dinov2 { backbone: BackboneSpec },
}

impl FeatureSource {
    pub fn label(&self) -> String {
        match self {
            FeatureSource::Bfe { .. } => "bfe".into(),
            FeatureSource::Dinov2 { backbone } => {
                format!("dinov2-{}-l{}", backbone.size.name(), backbone.layers_used.len())
            }
        }
    }
}

/// Feature extractor instantiated from a [`FeatureSource`].
pub enum Extractor {
    Bfe {
        config: BfeConfig,
        denoise: Option<NlMeansConfig>,
    },
    Vit { vit: Box<Vit>, device: Device },
}

impl Extractor {
    /// Loads backbone weights for published sizes; stub configurations get
    /// seeded random weights.
    pub fn new(src: &FeatureSource, device: &Device) -> Result<Self> {
        match src {
            FeatureSource::Bfe { config, denoise } => {
                config.validate()?;
                Ok(Extractor::Bfe {
                    config: config.clone(),
                    denoise: *denoise,
                })
            }
            FeatureSource::Dinov2 { backbone } => {
                let weights = match backbone.custom {
                    None => Some(load_weights(&backbone.checkpoint_path()?, device)?),
                    Some(_) => None,
                };
                let mut b = Builder::new(0, device, DType::F32);
                if let Some(w) = &weights {
                    b = b.with_weights(w);
                }
                let vit = Vit::new(&mut b, backbone, None, None)?;
                Ok(Extractor::Vit {
                    vit: Box::new(vit),
                    device: device.clone(),
                })
            }
        }
    }

    pub fn extract(&self, slice: &GraySlice) -> Result<FeatureMap> {
        match self {
            Extractor::Bfe { config, denoise } => match denoise {
                Some(nl) => bfe(&nl_means_with(slice, nl)?, config),
                None => bfe(slice, config),
            },
            Extractor::Vit { vit, device } => crate::neural::extract_features(vit, slice, device),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Predicts one class everywhere: `class`, or the most frequent training class.
    Constant {
        #[serde(default)]
        class: Option<u8>,
    },
    Classical {
        method: ClassicalMethod,
        #[serde(default)]
        config: ClassicalConfig,
    },
    RandomForest {
        #[serde(default)]
        rf: RfConfig,
        #[serde(default = "default_bfe_source")]
        features: FeatureSource,
    },
    Knn {
        features: FeatureSource,
        #[serde(default)]
        knn: KnnConfig,
    },
    /// A head trained on frozen features.
    Probe {
        features: FeatureSource,
        #[serde(default = "default_head")]
        head: HeadKind,
        #[serde(default)]
        probe: LinearProbeConfig,
    },
    Finetune {
        model: ModelSpec,
        #[serde(default)]
        train: TrainConfig,
        /// Fraction of training slices held out for best-epoch selection;
        /// no holdout when it rounds to zero.
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_bfe_source() -> FeatureSource {
    FeatureSource::Bfe {
        config: BfeConfig::default(),
        denoise: Some(NlMeansConfig::default()),
    }
}

fn default_head() -> HeadKind {
    HeadKind::Linear
}

fn default_val_fraction() -> f64 {
    0.1
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Constant { class } => match class {
                Some(c) => format!("constant-{c}"),
                None => "constant-majority".into(),
            },
            MethodSpec::Classical { method, .. } => method.name().into(),
            MethodSpec::RandomForest { features, .. } => format!("rf-{}", features.label()),
            MethodSpec::Knn { features, .. } => format!("knn-{}", features.label()),
            MethodSpec::Probe { features, .. } => format!("linear-{}", features.label()),
            MethodSpec::Finetune { model, .. } => model.label(),
        }
    }

    /// Rejects combinations that cannot run, before any work starts.
    pub fn validate(&self) -> Result<()> {
        match self {
            MethodSpec::Classical { config, .. } => {
                if config.n_bins < 2 {
                    return Err(Error::Config("n_bins must be >= 2".into()));
                }
            }
            MethodSpec::RandomForest { rf, .. } => rf.validate()?,
            MethodSpec::Knn { knn, .. } => knn.validate()?,
            MethodSpec::Probe { features, head, .. } => {
                if *head == HeadKind::Conv {
                    return Err(Error::Config(match features {
                        FeatureSource::Bfe { .. } => {
                            "a conv head on BFE features needs a learned projection; use head = \"linear\"".into()
                        }
                        FeatureSource::Dinov2 { .. } => {
                            "frozen conv heads are trained end to end; use a finetune method without lora".into()
                        }
                    }));
                }
            }
            MethodSpec::Finetune { model, train, val_fraction } => {
                model.validate()?;
                train.validate()?;
                if !(0.0..1.0).contains(val_fraction) {
                    return Err(Error::Config("val_fraction must be in [0, 1)".into()));
                }
            }
            MethodSpec::Constant { .. } => {}
        }
        Ok(())
    }

    pub fn build(&self, device: &Device) -> Result<Box<dyn SegMethod>> {
        self.validate()?;
        Ok(match self {
            MethodSpec::Constant { class } => Box::new(ConstantPredictor::new(*class)),
            MethodSpec::Classical { method, config } => Box::new(ClassicalSeg {
                method: *method,
                config: config.clone(),
                mapping: None,
                seed: 0,
            }),
            MethodSpec::RandomForest { rf, features } => Box::new(ForestSeg {
                config: rf.clone(),
                extractor: Extractor::new(features, device)?,
                model: None,
            }),
            MethodSpec::Knn { features, knn } => Box::new(KnnSeg {
                config: knn.clone(),
                extractor: Extractor::new(features, device)?,
                probe: None,
            }),
            MethodSpec::Probe { features, probe, .. } => Box::new(ProbeSeg {
                config: probe.clone(),
                extractor: Extractor::new(features, device)?,
                probe: None,
            }),
            MethodSpec::Finetune {
                model,
                train,
                val_fraction,
            } => Box::new(FinetuneSeg {
                spec: model.clone(),
                train: train.clone(),
                val_fraction: *val_fraction,
                device: device.clone(),
                model: None,
                palette: None,
                history: None,
            }),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub n_trainable: Option<usize>,
    /// Method-specific details (training history, grid scores, ...).
    pub details: serde_json::Value,
}

/// A segmentation method in the benchmark harness.
///
/// `fit` receives raw training pairs plus the evaluation view (crop and
/// resize applied to test slices); methods that learn from fixed views apply
/// it themselves, fine-tuned networks use their own augmentation instead.
pub trait SegMethod {
    fn name(&self) -> String;
    fn fit(&mut self, train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>, seed: u64) -> Result<FitInfo>;
    fn predict(&self, slice: &GraySlice) -> Result<LabelMask>;
    /// Persists the fitted model into `dir` when the method has one worth keeping.
    fn save(&self, _dir: &Path) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

/// Applies an evaluation view to a pair (or returns it unchanged).
pub fn view_pair(s: &GraySlice, m: &LabelMask, view: Option<&AugmentConfig>) -> Result<(GraySlice, LabelMask)> {
    match view {
        Some(v) => {
            let (s, m) = augment(s, Some(m), v)?;
            Ok((s, m.expect("mask in, mask out")))
        }
        None => Ok((s.clone(), m.clone())),
    }
}

fn view_all(train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>) -> Result<Vec<(GraySlice, LabelMask)>> {
    train.iter().map(|(s, m)| view_pair(s, m, view)).collect()
}

fn palette_of(train: &[(GraySlice, LabelMask)]) -> Result<Arc<ClassPalette>> {
    train
        .first()
        .map(|p| p.1.palette_arc())
        .ok_or_else(|| Error::invalid("no training pairs"))
}

/// Nearest-neighbour resample of a prediction to the GT grid.
pub fn match_resolution(pred: LabelMask, h: usize, w: usize) -> Result<LabelMask> {
    if pred.dim() == (h, w) {
        return Ok(pred);
    }
    let l = resize_nearest(pred.labels(), h, w);
    pred.with_labels(l)
}

pub struct ConstantPredictor {
    fixed: Option<u8>,
    class: Option<u8>,
    palette: Option<Arc<ClassPalette>>,
}

impl ConstantPredictor {
    pub fn new(class: Option<u8>) -> Self {
        Self {
            fixed: class,
            class: None,
            palette: None,
        }
    }
}

impl SegMethod for ConstantPredictor {
    fn name(&self) -> String {
        MethodSpec::Constant { class: self.fixed }.label()
    }

    fn fit(&mut self, train: &[(GraySlice, LabelMask)], _: Option<&AugmentConfig>, _: u64) -> Result<FitInfo> {
        let palette = palette_of(train)?;
        let class = match self.fixed {
            Some(c) if (c as usize) < palette.len() => c,
            Some(c) => return Err(Error::Config(format!("class {c} outside a {}-class palette", palette.len()))),
            None => {
                let mut counts = vec![0u64; palette.len()];
                for (_, m) in train {
                    for (c, n) in m.class_counts().into_iter().enumerate() {
                        counts[c] += n;
                    }
                }
                // first maximum wins ties
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&c| c == best).unwrap_or(0) as u8
            }
        };
        self.class = Some(class);
        self.palette = Some(palette);
        Ok(FitInfo {
            n_trainable: Some(0),
            details: serde_json::json!({ "class": class }),
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let (Some(c), Some(p)) = (self.class, &self.palette) else {
            return Err(Error::invalid("predict before fit"));
        };
        let (h, w) = slice.dim();
        LabelMask::filled(h, w, c, p.clone())
    }
}

pub struct ClassicalSeg {
    method: ClassicalMethod,
    config: ClassicalConfig,
    mapping: Option<ClassOrderMapping>,
    seed: u64,
}

impl SegMethod for ClassicalSeg {
    fn name(&self) -> String {
        self.method.name().into()
    }

    /// Only the cluster-to-class order is learned, from mean GT intensities.
    fn fit(&mut self, train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>, seed: u64) -> Result<FitInfo> {
        let pairs = view_all(train, view)?;
        let mapping = ClassOrderMapping::from_gt(pairs.iter().map(|(s, m)| (s, m)))?;
        let details = serde_json::to_value(&mapping)?;
        self.mapping = Some(mapping);
        self.seed = seed;
        Ok(FitInfo {
            n_trainable: Some(0),
            details,
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let mapping = self.mapping.as_ref().ok_or_else(|| Error::invalid("predict before fit"))?;
        let (clusters, _) = segment(slice, self.method, mapping.n_classes(), self.seed, &self.config)?;
        mapping.apply(&clusters)
    }
}

pub struct ForestSeg {
    config: RfConfig,
    extractor: Extractor,
    model: Option<RfModel>,
}

impl ForestSeg {
    pub fn model(&self) -> Option<&RfModel> {
        self.model.as_ref()
    }
}

fn extract_all(ex: &Extractor, pairs: &[(GraySlice, LabelMask)]) -> Result<(Vec<FeatureMap>, Vec<LabelMask>)> {
    let mut fs = Vec::with_capacity(pairs.len());
    let mut ms = Vec::with_capacity(pairs.len());
    for (s, m) in pairs {
        fs.push(ex.extract(s)?);
        ms.push(m.clone());
    }
    Ok((fs, ms))
}

impl SegMethod for ForestSeg {
    fn name(&self) -> String {
        "rf".into()
    }

    fn fit(&mut self, train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>, seed: u64) -> Result<FitInfo> {
        let pairs = view_all(train, view)?;
        let (fs, ms) = extract_all(&self.extractor, &pairs)?;
        if fs.iter().zip(&ms).any(|(f, m)| (f.height(), f.width()) != m.dim()) {
            return Err(Error::Config("random forest needs full-resolution pixel features".into()));
        }
        let cfg = RfConfig {
            seed: self.config.seed.wrapping_add(seed),
            ..self.config.clone()
        };
        let model = rf_train(&fs, &ms, &cfg)?;
        let details = serde_json::json!({
            "n_trees": model.config.n_trees,
            "max_depth": model.config.max_depth,
            "grid_results": model.grid_results,
        });
        self.model = Some(model);
        Ok(FitInfo {
            n_trainable: None,
            details,
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let m = self.model.as_ref().ok_or_else(|| Error::invalid("predict before fit"))?;
        rf_predict(m, &self.extractor.extract(slice)?)
    }
}

pub struct KnnSeg {
    config: KnnConfig,
    extractor: Extractor,
    probe: Option<KnnProbe>,
}

impl SegMethod for KnnSeg {
    fn name(&self) -> String {
        "knn".into()
    }

    fn fit(&mut self, train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>, _: u64) -> Result<FitInfo> {
        let pairs = view_all(train, view)?;
        let (fs, ms) = extract_all(&self.extractor, &pairs)?;
        let probe = KnnProbe::fit(&fs, &ms, &self.config)?;
        let details = serde_json::json!({ "n_points": probe.n_points(), "k": self.config.k });
        self.probe = Some(probe);
        Ok(FitInfo {
            n_trainable: Some(0),
            details,
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let p = self.probe.as_ref().ok_or_else(|| Error::invalid("predict before fit"))?;
        let (h, w) = slice.dim();
        match_resolution(p.predict(&self.extractor.extract(slice)?)?, h, w)
    }
}

pub struct ProbeSeg {
    config: LinearProbeConfig,
    extractor: Extractor,
    probe: Option<LinearProbe>,
}

impl SegMethod for ProbeSeg {
    fn name(&self) -> String {
        "linear-probe".into()
    }

    fn fit(&mut self, train: &[(GraySlice, LabelMask)], view: Option<&AugmentConfig>, seed: u64) -> Result<FitInfo> {
        let pairs = view_all(train, view)?;
        let (fs, ms) = extract_all(&self.extractor, &pairs)?;
        let cfg = LinearProbeConfig {
            seed: self.config.seed.wrapping_add(seed),
            ..self.config.clone()
        };
        let probe = LinearProbe::fit(&fs, &ms, &cfg)?;
        let n = probe.params.n_trainable();
        self.probe = Some(probe);
        Ok(FitInfo {
            n_trainable: Some(n),
            details: serde_json::Value::Null,
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let p = self.probe.as_ref().ok_or_else(|| Error::invalid("predict before fit"))?;
        let (h, w) = slice.dim();
        p.predict(&self.extractor.extract(slice)?, h, w)
    }
}

pub struct FinetuneSeg {
    spec: ModelSpec,
    train: TrainConfig,
    val_fraction: f64,
    device: Device,
    model: Option<SegModel>,
    palette: Option<Arc<ClassPalette>>,
    history: Option<(TrainConfig, TrainHistory, u64)>,
}

pub const MODEL_FILE: &str = "model.safetensors";

impl FinetuneSeg {
    /// Wraps an already trained model, e.g. one restored from a checkpoint.
    pub fn from_model(model: SegModel, palette: Arc<ClassPalette>) -> Self {
        Self {
            spec: model.spec().clone(),
            train: TrainConfig::default(),
            val_fraction: 0.0,
            device: model.device().clone(),
            model: Some(model),
            palette: Some(palette),
            history: None,
        }
    }

    pub fn model(&self) -> Option<&SegModel> {
        self.model.as_ref()
    }
}

impl SegMethod for FinetuneSeg {
    fn name(&self) -> String {
        self.spec.label()
    }

    fn fit(&mut self, train: &[(GraySlice, LabelMask)], _: Option<&AugmentConfig>, seed: u64) -> Result<FitInfo> {
        let palette = palette_of(train)?;
        let mut model = SegModel::build(&self.spec, seed, &self.device)?;
        let n_val = (self.val_fraction * train.len() as f64).round() as usize;
        let n_val = if n_val >= train.len() { 0 } else { n_val };
        let (tr, va) = train.split_at(train.len() - n_val);
        let cfg = TrainConfig {
            seed: self.train.seed.wrapping_add(seed),
            ..self.train.clone()
        };
        let history = train_segmenter(&mut model, tr, va, &cfg)?;
        let n = model.n_trainable();
        let details = serde_json::to_value(&history)?;
        self.model = Some(model);
        self.palette = Some(palette);
        self.history = Some((cfg, history, seed));
        Ok(FitInfo {
            n_trainable: Some(n),
            details,
        })
    }

    fn predict(&self, slice: &GraySlice) -> Result<LabelMask> {
        let (Some(m), Some(palette)) = (&self.model, &self.palette) else {
            return Err(Error::invalid("predict before fit"));
        };
        let mut out = m.predict(&[slice], palette)?;
        let (h, w) = slice.dim();
        match_resolution(out.pop().expect("one mask"), h, w)
    }

    fn save(&self, dir: &Path) -> Result<Option<PathBuf>> {
        let Some(m) = &self.model else {
            return Ok(None);
        };
        let p = dir.join(MODEL_FILE);
        match &self.history {
            Some((cfg, h, seed)) => save_checkpoint(m, &p, *seed, Some(cfg), Some(h))?,
            None => save_checkpoint(m, &p, 0, None, None)?,
        };
        Ok(Some(p))
    }
}
