//! Experiment runners: single split points, data-regime sweeps, the model
//! ablation, classical baselines, probing and image classification.

use std::collections::HashSet;
use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::method::{view_pair, FeatureSource, MethodSpec, SegMethod};
use super::record::{aggregate, code_version, config_hash, Aggregate, RunRecord, RunStore};
use crate::classical::{ClassicalConfig, ClassicalMethod};
use crate::error::{Error, Result};
use crate::ingest::{make_classification_split, make_split, DatasetCatalog, SliceRef, SplitSpec};
use crate::metrics::{confusion_matrix, ConfusionMatrix, EvalReport};
use crate::neural::{
    image_embedding, BackboneSize, BackboneSpec, Builder, HeadKind, HeadSpec, LinearProbeConfig, LoraConfig,
    ModelSpec, QuantConfig, TrainConfig, UnetSize, Vit,
};
use crate::preprocess::filters::resize_bilinear;
use crate::preprocess::AugmentConfig;
use crate::shallow::{KnnConfig, KnnIndex, Metric};
use crate::types::{GraySlice, LabelMask};

pub const DEFAULT_N_TRAIN_GRID: [usize; 9] = [4, 10, 20, 50, 100, 200, 500, 1000, 1200];

fn default_grid() -> Vec<usize> {
    DEFAULT_N_TRAIN_GRID.to_vec()
}
fn default_seeds() -> usize {
    5
}
fn default_train_samples() -> Vec<String> {
    vec!["S1".into(), "S2".into()]
}
fn default_test_sample() -> String {
    "S3".into()
}
fn default_view() -> Option<AugmentConfig> {
    Some(AugmentConfig::eval(224, 560))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_grid")]
    pub n_train: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: Vec<String>,
    #[serde(default = "default_test_sample")]
    pub test_sample: String,
    /// Cap on evaluated test slices; all when unset.
    #[serde(default)]
    pub n_test_images: Option<usize>,
    /// Transform applied to test slices (and to training slices of methods
    /// without their own augmentation); native resolution when unset.
    #[serde(default = "default_view")]
    pub view: Option<AugmentConfig>,
    /// Reuse stored runs whose config hash already exists.
    #[serde(default)]
    pub resume: bool,
}

impl SweepSpec {
    pub fn new(methods: Vec<MethodSpec>) -> Self {
        Self {
            methods,
            n_train: default_grid(),
            n_seeds: default_seeds(),
            train_samples: default_train_samples(),
            test_sample: default_test_sample(),
            n_test_images: None,
            view: default_view(),
            resume: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("sweep needs at least one method".into()));
        }
        if self.n_train.is_empty() || self.n_train.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("n_train grid must be non-empty and strictly ascending".into()));
        }
        if self.n_train[0] == 0 {
            return Err(Error::Config("n_train values must be >= 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.train_samples.contains(&self.test_sample) {
            return Err(Error::Config(format!("test sample {} is also a training sample", self.test_sample)));
        }
        if let Some(v) = &self.view {
            v.validate()?;
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }

    fn split(&self, n_train: usize, seed: u64) -> SplitSpec {
        SplitSpec {
            train_samples: self.train_samples.clone(),
            test_samples: vec![self.test_sample.clone()],
            n_train_images: n_train,
            n_test_images: self.n_test_images,
            seed,
        }
    }
}

/// Fails when any test slice (or test sample) also appears in training.
pub fn check_no_leak(train: &[SliceRef], test: &[SliceRef]) -> Result<()> {
    let train_ids: HashSet<String> = train.iter().map(|s| s.id()).collect();
    let train_samples: HashSet<&str> = train.iter().map(|s| s.sample_id.as_str()).collect();
    if let Some(t) = test
        .iter()
        .find(|t| train_ids.contains(&t.id()) || train_samples.contains(t.sample_id.as_str()))
    {
        return Err(Error::invalid(format!("test slice {} leaks into training", t.id())));
    }
    Ok(())
}

fn load_pairs(catalog: &DatasetCatalog, refs: &[SliceRef]) -> Result<Vec<(GraySlice, LabelMask)>> {
    refs.iter()
        .map(|r| {
            let pal = catalog.palette_of(&r.sample_id)?;
            Ok((r.load()?, r.load_mask(pal)?))
        })
        .collect()
}

/// Called with each test slice's reference and its prediction.
pub type PredictionSink<'a> = &'a mut dyn FnMut(&SliceRef, &LabelMask) -> Result<()>;

/// The stored config of a run point and its hash.
pub fn point_config(method: &MethodSpec, split: &SplitSpec, view: Option<&AugmentConfig>) -> (serde_json::Value, String) {
    let cfg_json = serde_json::json!({
        "method": method,
        "split": split,
        "view": view,
    });
    let hash = config_hash(&cfg_json, split.n_train_images, split.seed);
    (cfg_json, hash)
}

/// Fits one method on one split and evaluates it on the test slices; test
/// confusion is summed over slices. Returns the fitted method as well.
pub fn fit_and_evaluate(
    catalog: &DatasetCatalog,
    method: &MethodSpec,
    split: &SplitSpec,
    view: Option<&AugmentConfig>,
    device: &Device,
    sink: Option<PredictionSink>,
) -> Result<(RunRecord, Box<dyn SegMethod>)> {
    let (cfg_json, hash) = point_config(method, split, view);
    let (train_refs, test_refs) = make_split(catalog, split)?;
    check_no_leak(&train_refs, &test_refs)?;
    if test_refs.is_empty() {
        return Err(Error::invalid("split has no test slices"));
    }
    let t0 = Instant::now();
    let train = load_pairs(catalog, &train_refs)?;
    let mut m = method.build(device)?;
    let info = m.fit(&train, view, split.seed)?;
    drop(train);
    let report = evaluate_on(catalog, m.as_ref(), &test_refs, view, sink, (method.label(), split.n_train_images, split.seed))?;
    let rec = RunRecord {
        method: method.label(),
        method_config: cfg_json,
        n_train: split.n_train_images,
        seed: split.seed,
        config_hash: hash,
        code_version: code_version(),
        device: format!("{device:?}"),
        wall_clock_s: t0.elapsed().as_secs_f64(),
        n_trainable: info.n_trainable,
        train_ids: train_refs.iter().map(|r| r.id()).collect(),
        test_ids: test_refs.iter().map(|r| r.id()).collect(),
        fit_details: info.details,
        report,
    };
    Ok((rec, m))
}

/// Evaluates a fitted method on test slices; `tag` is (method name, n_train, seed).
pub fn evaluate_on(
    catalog: &DatasetCatalog,
    m: &dyn SegMethod,
    test_refs: &[SliceRef],
    view: Option<&AugmentConfig>,
    mut sink: Option<PredictionSink>,
    tag: (String, usize, u64),
) -> Result<EvalReport> {
    let mut cm: Option<ConfusionMatrix> = None;
    let mut names = Vec::new();
    for r in test_refs {
        let pal = catalog.palette_of(&r.sample_id)?;
        let (s, gt) = view_pair(&r.load()?, &r.load_mask(pal)?, view)?;
        let pred = m.predict(&s)?;
        let c = confusion_matrix(&pred, &gt)?;
        if let Some(f) = sink.as_mut() {
            f(r, &pred)?;
        }
        match &mut cm {
            Some(acc) => acc.merge(&c)?,
            None => {
                names = gt.palette().names().to_vec();
                cm = Some(c);
            }
        }
    }
    let cm = cm.ok_or_else(|| Error::invalid("no test slices to evaluate"))?;
    EvalReport::from_confusion(cm, names, tag.0, tag.1, tag.2)
}

/// [`fit_and_evaluate`] with run-store bookkeeping: stored runs are reused
/// when `resume` is set, new ones are saved.
pub fn run_point(
    catalog: &DatasetCatalog,
    method: &MethodSpec,
    split: &SplitSpec,
    view: Option<&AugmentConfig>,
    device: &Device,
    store: Option<&RunStore>,
    resume: bool,
) -> Result<RunRecord> {
    if resume {
        let (_, hash) = point_config(method, split, view);
        if let Some(r) = store.map(|s| s.load(&hash)).transpose()?.flatten() {
            log::info!("reusing run {hash}");
            return Ok(r);
        }
    }
    let (rec, _) = fit_and_evaluate(catalog, method, split, view, device, None)?;
    if let Some(s) = store {
        s.save(&rec)?;
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub table: Vec<Aggregate>,
}

/// Every method at every training size and seed (seeds are `0..n_seeds`);
/// writes `results.csv` and an IoU-vs-size plot when a store is given.
pub fn run_sweep(spec: &SweepSpec, catalog: &DatasetCatalog, device: &Device, store: Option<&RunStore>) -> Result<SweepResult> {
    spec.validate()?;
    let mut records = Vec::new();
    for method in &spec.methods {
        for &n in &spec.n_train {
            for seed in 0..spec.n_seeds as u64 {
                let rec = run_point(catalog, method, &spec.split(n, seed), spec.view.as_ref(), device, store, spec.resume)?;
                log::info!("{} n={n} seed={seed} IoU {:.4}", rec.method, rec.report.mean_iou);
                records.push(rec);
            }
        }
    }
    let table = aggregate(&records);
    if let Some(s) = store {
        s.write_results(&table)?;
        if spec.n_train.len() > 1 {
            let fig = crate::interpret::sweep_figure(&table)?;
            fig.save(&s.root().join("figures").join("sweep"))?;
        }
    }
    Ok(SweepResult { records, table })
}

/// The seven model/head combinations compared at one training size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default = "default_ablation_n")]
    pub n_train: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneSize,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_test_sample")]
    pub test_sample: String,
    #[serde(default = "default_train_samples")]
    pub train_samples: Vec<String>,
    #[serde(default)]
    pub n_test_images: Option<usize>,
}

fn default_ablation_n() -> usize {
    1000
}
fn default_backbone() -> BackboneSize {
    BackboneSize::Base
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            n_train: default_ablation_n(),
            n_seeds: default_seeds(),
            backbone: default_backbone(),
            lora: LoraConfig::default(),
            quant: QuantConfig::default(),
            train: TrainConfig::default(),
            test_sample: default_test_sample(),
            train_samples: default_train_samples(),
            n_test_images: None,
        }
    }
}

impl AblationSpec {
    pub fn methods(&self, n_classes: usize) -> Vec<MethodSpec> {
        let head = |k| HeadSpec::new(k, n_classes);
        let vit = |k, ft: bool| MethodSpec::Finetune {
            model: ModelSpec::Vit {
                backbone: BackboneSpec::new(self.backbone, 1),
                head: head(k),
                lora: ft.then(|| self.lora.clone()),
                quant: ft.then(|| self.quant.clone()),
            },
            train: self.train.clone(),
            val_fraction: 0.1,
        };
        let unet = |size| {
            let spec = ModelSpec::Unet { size, n_classes };
            let mut train = TrainConfig::for_model(&spec);
            train.augment = self.train.augment.clone();
            train.epochs = self.train.epochs;
            train.seed = self.train.seed;
            MethodSpec::Finetune {
                model: spec,
                train,
                val_fraction: 0.1,
            }
        };
        vec![
            vit(HeadKind::Linear, false),
            vit(HeadKind::Linear, true),
            vit(HeadKind::Conv, false),
            vit(HeadKind::Conv, true),
            unet(UnetSize::Small),
            unet(UnetSize::Large),
            MethodSpec::Finetune {
                model: ModelSpec::ResnetConvHead {
                    head: head(HeadKind::Conv),
                    lora: Some(self.lora.clone()),
                    quant: Some(self.quant.clone()),
                    checkpoint: None,
                    random_init: false,
                },
                train: self.train.clone(),
                val_fraction: 0.1,
            },
        ]
    }

    pub fn sweep(&self, n_classes: usize) -> SweepSpec {
        SweepSpec {
            methods: self.methods(n_classes),
            n_train: vec![self.n_train],
            n_seeds: self.n_seeds,
            train_samples: self.train_samples.clone(),
            test_sample: self.test_sample.clone(),
            n_test_images: self.n_test_images,
            view: default_view(),
            resume: true,
        }
    }
}

pub fn run_ablation(spec: &AblationSpec, catalog: &DatasetCatalog, device: &Device, store: Option<&RunStore>) -> Result<SweepResult> {
    let n_classes = catalog.palette_of(&spec.test_sample)?.len();
    run_sweep(&spec.sweep(n_classes), catalog, device, store)
}

/// IoU of each classical method on each sample (rows: methods, columns: samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalTable {
    pub methods: Vec<ClassicalMethod>,
    pub samples: Vec<String>,
    pub iou: Vec<Vec<f64>>,
    pub reports: Vec<EvalReport>,
}

impl ClassicalTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("method,{}\n", self.samples.join(","));
        for (m, row) in self.methods.iter().zip(&self.iou) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!("{},{}\n", m.name(), cells.join(",")));
        }
        s
    }
}

/// Segments every slice of each sample with each method; the cluster-to-class
/// order comes from the mean GT intensity of the sample's own slices.
pub fn run_classical(
    catalog: &DatasetCatalog,
    samples: &[String],
    methods: &[ClassicalMethod],
    config: &ClassicalConfig,
    max_slices: Option<usize>,
    seed: u64,
) -> Result<ClassicalTable> {
    let mut iou = vec![vec![0.0; samples.len()]; methods.len()];
    let mut reports = Vec::new();
    for (j, sample) in samples.iter().enumerate() {
        let mut refs = catalog.slices(sample)?;
        if let Some(n) = max_slices {
            refs.truncate(n);
        }
        let pairs = load_pairs(catalog, &refs)?;
        for (i, &method) in methods.iter().enumerate() {
            let spec = MethodSpec::Classical {
                method,
                config: config.clone(),
            };
            let mut m = spec.build(&Device::Cpu)?;
            m.fit(&pairs, None, seed)?;
            let mut cm: Option<ConfusionMatrix> = None;
            for (s, gt) in &pairs {
                let c = confusion_matrix(&m.predict(s)?, gt)?;
                match &mut cm {
                    Some(a) => a.merge(&c)?,
                    None => cm = Some(c),
                }
            }
            let names = pairs[0].1.palette().names().to_vec();
            let rep = EvalReport::from_confusion(cm.expect("slices"), names, format!("{}-{sample}", method.name()), 0, seed)?;
            iou[i][j] = rep.mean_iou;
            reports.push(rep);
        }
    }
    Ok(ClassicalTable {
        methods: methods.to_vec(),
        samples: samples.to_vec(),
        iou,
        reports,
    })
}

/// kNN and linear probes over backbone sizes, plus BFE baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingSpec {
    #[serde(default = "all_sizes")]
    pub sizes: Vec<BackboneSize>,
    #[serde(default = "yes")]
    pub include_bfe: bool,
    pub n_train: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub probe: LinearProbeConfig,
    #[serde(default = "default_train_samples")]
    pub train_samples: Vec<String>,
    #[serde(default = "default_test_sample")]
    pub test_sample: String,
    #[serde(default)]
    pub n_test_images: Option<usize>,
}

fn all_sizes() -> Vec<BackboneSize> {
    BackboneSize::ALL.to_vec()
}
fn yes() -> bool {
    true
}

impl ProbingSpec {
    pub fn methods(&self) -> Vec<MethodSpec> {
        let mut v = Vec::new();
        for &size in &self.sizes {
            let f = |n| FeatureSource::Dinov2 {
                backbone: BackboneSpec::new(size, n),
            };
            v.push(MethodSpec::Knn {
                features: f(1),
                knn: self.knn.clone(),
            });
            for n in [1, 4] {
                v.push(MethodSpec::Probe {
                    features: f(n),
                    head: HeadKind::Linear,
                    probe: self.probe.clone(),
                });
            }
        }
        if self.include_bfe {
            let bfe = FeatureSource::Bfe {
                config: Default::default(),
                denoise: Some(Default::default()),
            };
            v.push(MethodSpec::Knn {
                features: bfe.clone(),
                knn: self.knn.clone(),
            });
            v.push(MethodSpec::Probe {
                features: bfe,
                head: HeadKind::Linear,
                probe: self.probe.clone(),
            });
        }
        v
    }
}

pub fn run_probing(spec: &ProbingSpec, catalog: &DatasetCatalog, device: &Device, store: Option<&RunStore>) -> Result<SweepResult> {
    let sweep = SweepSpec {
        methods: spec.methods(),
        n_train: vec![spec.n_train],
        n_seeds: spec.n_seeds,
        train_samples: spec.train_samples.clone(),
        test_sample: spec.test_sample.clone(),
        n_test_images: spec.n_test_images,
        view: Some(AugmentConfig::eval(224, 560)),
        resume: true,
    };
    run_sweep(&sweep, catalog, device, store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    #[serde(default = "default_backbone")]
    pub backbone: BackboneSize,
    #[serde(default = "default_n_images")]
    pub n_images: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_images() -> usize {
    3000
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_ks() -> Vec<usize> {
    vec![1, 5, 10, 20, 50, 100, 200]
}
fn default_resolutions() -> Vec<usize> {
    vec![64, 128, 224, 448, 560]
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            n_images: default_n_images(),
            train_fraction: default_train_fraction(),
            ks: default_ks(),
            resolutions: default_resolutions(),
            metric: Metric::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationCell {
    pub k: usize,
    pub resolution: usize,
    pub accuracy: f64,
}

/// Downsamples to `res` (the information the model sees), then resizes to the
/// nearest multiple of the patch size the backbone accepts.
pub fn classification_view(slice: &GraySlice, res: usize) -> Result<GraySlice> {
    let p = crate::neural::PATCH;
    let side = res.div_ceil(p) * p;
    let small = resize_bilinear(slice.pixels(), res, res);
    slice.with_pixels(resize_bilinear(&small, side, side))
}

/// Fraction of test embeddings whose kNN vote matches their label.
pub fn knn_accuracy(train: &[(Vec<f32>, u8)], test: &[(Vec<f32>, u8)], k: usize, metric: Metric, n_classes: usize) -> Result<f64> {
    let dim = train.first().map(|t| t.0.len()).ok_or_else(|| Error::invalid("no training embeddings"))?;
    let mut index = KnnIndex::new(dim, n_classes, metric);
    for (v, l) in train {
        index.push(v, *l)?;
    }
    let q: Vec<Vec<f32>> = test.iter().map(|t| t.0.clone()).collect();
    let pred = index.predict_many(&q, k)?;
    let hits = pred.iter().zip(test).filter(|(p, t)| **p == t.1).count();
    Ok(hits as f64 / test.len().max(1) as f64)
}

/// Class-token kNN accuracy over (k, resolution); `k` values larger than the
/// training set are skipped.
pub fn run_classification(spec: &ClassificationSpec, catalog: &DatasetCatalog, device: &Device) -> Result<Vec<ClassificationCell>> {
    let (train, test) = make_classification_split(catalog, spec.n_images, spec.train_fraction, spec.seed)?;
    let bspec = BackboneSpec::new(spec.backbone, 1);
    let weights = crate::neural::vit::load_weights(&bspec.checkpoint_path()?, device)?;
    let mut b = Builder::new(0, device, candle_core::DType::F32).with_weights(&weights);
    let vit = Vit::new(&mut b, &bspec, None, None)?;
    let first = train.first().ok_or_else(|| Error::invalid("empty classification split"))?;
    let n_classes = catalog.palette_of(&first.sample_id)?.len();
    let mut out = Vec::new();
    for &res in &spec.resolutions {
        let embed = |refs: &[SliceRef]| -> Result<Vec<(Vec<f32>, u8)>> {
            refs.iter()
                .map(|r| {
                    let s = classification_view(&r.load()?, res)?;
                    Ok((image_embedding(&vit, &s, device)?, catalog.class_of(&r.sample_id)?))
                })
                .collect()
        };
        let tr = embed(&train)?;
        let te = embed(&test)?;
        for &k in spec.ks.iter().filter(|&&k| k <= tr.len()) {
            let accuracy = knn_accuracy(&tr, &te, k, spec.metric, n_classes)?;
            log::info!("res {res} k {k} accuracy {accuracy:.4}");
            out.push(ClassificationCell { k, resolution: res, accuracy });
        }
    }
    Ok(out)
}
