//! The experiment config file (TOML) and dotted `key=value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::bench::{AblationSpec, ClassificationSpec, FeatureSource, MethodSpec, ProbingSpec, SweepSpec};
use crate::classical::{ClassicalConfig, ClassicalMethod};
use crate::error::{Error, Result};
use crate::ingest::{SplitSpec, DEFAULT_SATURATION};
use crate::interpret::{Normalize, TsneConfig};
use crate::neural::{BackboneSize, BackboneSpec, HeadKind, HeadSpec, ModelSpec, TrainConfig};
use crate::preprocess::{AugmentConfig, BfeConfig, NlMeansConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Which training and test samples a single run draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_samples: Vec<String>,
    pub test_sample: String,
    pub n_train: usize,
    pub n_test_images: Option<usize>,
    /// Transform applied to test slices; native resolution when unset.
    pub view: Option<AugmentConfig>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_samples: vec!["S1".into(), "S2".into()],
            test_sample: "S3".into(),
            n_train: 1000,
            n_test_images: None,
            view: Some(AugmentConfig::eval(224, 560)),
        }
    }
}

impl SplitConfig {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_samples: self.train_samples.clone(),
            test_samples: vec![self.test_sample.clone()],
            n_train_images: self.n_train,
            n_test_images: self.n_test_images,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Saturated fraction for auto-contrast; skipped when unset.
    pub contrast_saturation: Option<f64>,
    pub denoise: bool,
    pub nlmeans: NlMeansConfig,
    /// Also write BFE feature maps.
    pub bfe: bool,
    pub bfe_config: BfeConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            contrast_saturation: Some(DEFAULT_SATURATION),
            denoise: true,
            nlmeans: NlMeansConfig::default(),
            bfe: false,
            bfe_config: BfeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub method: ClassicalMethod,
    pub n_classes: usize,
    pub classical: ClassicalConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            method: ClassicalMethod::Otsu,
            n_classes: 3,
            classical: ClassicalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub features: FeatureSource,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            features: FeatureSource::Dinov2 {
                backbone: BackboneSpec::new(BackboneSize::Small, 1),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub method: MethodSpec,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            method: MethodSpec::Knn {
                features: ExtractConfig::default().features,
                knn: Default::default(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Vit {
                backbone: BackboneSpec::new(BackboneSize::Base, 1),
                head: HeadSpec::new(HeadKind::Conv, 3),
                lora: Some(Default::default()),
                quant: Some(Default::default()),
            },
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeConfig {
    pub tsne: TsneConfig,
    pub normalize: Normalize,
    /// Backbone for embeddings and PCA views.
    pub backbone: BackboneSize,
    /// Images per classification sample in the t-SNE plot.
    pub n_per_sample: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            tsne: TsneConfig::default(),
            normalize: Normalize::Row,
            backbone: BackboneSize::Base,
            n_per_sample: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset catalog (TOML).
    pub catalog: Option<PathBuf>,
    pub output: PathBuf,
    pub device: String,
    pub seed: u64,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub segment: SegmentConfig,
    pub extract: ExtractConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub visualize: VisualizeConfig,
    pub sweep: Option<SweepSpec>,
    pub ablation: Option<AblationSpec>,
    pub probing: Option<ProbingSpec>,
    pub classification: Option<ClassificationSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            output: PathBuf::from("runs"),
            device: "cpu".into(),
            seed: 0,
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            segment: SegmentConfig::default(),
            extract: ExtractConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            visualize: VisualizeConfig::default(),
            sweep: None,
            ablation: None,
            probing: None,
            classification: None,
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// A raw override value: any TOML literal, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut t = root;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            let mut s = other.to_string();
            if s.len() > 60 {
                s.truncate(57);
                s.push_str("...");
            }
            out.push((prefix.to_string(), s));
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }

    /// Applies `key=value` overrides to the parsed config. Unknown keys fail.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(cfg_err)?;
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override: {}", e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        self.device()?;
        self.split.spec(self.seed).validate()?;
        if let Some(v) = &self.split.view {
            v.validate()?;
        }
        if let Some(s) = self.preprocess.contrast_saturation {
            if !(0.0..0.5).contains(&s) {
                return Err(Error::Config(format!("contrast_saturation must be in [0, 0.5), got {s}")));
            }
        }
        self.preprocess.bfe_config.validate()?;
        if self.segment.n_classes < 2 {
            return Err(Error::Config("segment.n_classes must be >= 2".into()));
        }
        self.probe.method.validate()?;
        self.finetune.model.validate()?;
        self.finetune.train.validate()?;
        if !(0.0..1.0).contains(&self.finetune.val_fraction) {
            return Err(Error::Config("finetune.val_fraction must be in [0, 1)".into()));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// Only the CPU backend is compiled in.
    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::Config(format!("device {other:?} is not available in this build (use \"cpu\")"))),
        }
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&p, self.to_toml()?)?;
        Ok(p)
    }

    /// A config with every optional section filled in, for key listings.
    fn example() -> Self {
        Self {
            catalog: Some(PathBuf::from("catalog.toml")),
            sweep: Some(SweepSpec::new(vec![MethodSpec::Constant { class: None }])),
            ablation: Some(AblationSpec::default()),
            probing: serde_json::from_value(serde_json::json!({ "n_train": 1000 })).ok(),
            classification: Some(ClassificationSpec::default()),
            ..Self::default()
        }
    }

    /// Dotted keys with their defaults: top-level keys plus the given sections.
    pub fn keys(sections: &[&str]) -> Vec<(String, String)> {
        let table = toml::Table::try_from(Self::example()).expect("config serializes");
        let mut out = Vec::new();
        for (k, v) in &table {
            if !v.is_table() || sections.contains(&k.as_str()) {
                flatten(k, v, &mut out);
            }
        }
        out
    }

    pub fn keys_help(sections: &[&str]) -> String {
        let mut s = String::from("Config keys (set in --config or with --set key=value):\n");
        for (k, v) in Self::keys(sections) {
            let _ = writeln!(s, "  {k} = {v}");
        }
        s
    }
}
