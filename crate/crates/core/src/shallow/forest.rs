//! CART random forest for per-pixel classification.
//!
//! Trees split on Gini impurity with `x <= threshold` going left. Thresholds
//! are midpoints between consecutive distinct values. Leaves and the forest
//! vote both break ties toward the lowest class index.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::types::{ClassPalette, FeatureMap, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturesPerSplit {
    Sqrt,
    All,
    Count(usize),
}

impl FeaturesPerSplit {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            FeaturesPerSplit::Sqrt => ((n_features as f64).sqrt() as usize).max(1),
            FeaturesPerSplit::All => n_features,
            FeaturesPerSplit::Count(c) => c.clamp(1, n_features),
        }
    }
}

/// Search space for [`rf_train`]; the best point by held-out IoU is retrained on all data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfGrid {
    pub n_trees: Vec<usize>,
    /// `None` is unlimited depth.
    pub max_depth: Vec<Option<usize>>,
    pub features_per_split: Vec<FeaturesPerSplit>,
    /// Fraction of training slices held out for selection.
    pub holdout_fraction: f64,
}

impl Default for RfGrid {
    fn default() -> Self {
        Self {
            n_trees: vec![50, 100, 200],
            max_depth: vec![Some(8), Some(16), None],
            features_per_split: vec![FeaturesPerSplit::Sqrt, FeaturesPerSplit::All],
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub features_per_split: FeaturesPerSplit,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    /// Pixels drawn per training image; all pixels when unset.
    pub max_pixels_per_image: Option<usize>,
    pub seed: u64,
    pub grid: Option<RfGrid>,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: Some(16),
            features_per_split: FeaturesPerSplit::Sqrt,
            bootstrap: true,
            min_samples_split: 2,
            max_pixels_per_image: Some(20_000),
            seed: 0,
            grid: None,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::Config("min_samples_split must be >= 2".into()));
        }
        if let Some(g) = &self.grid {
            if g.n_trees.is_empty() || g.max_depth.is_empty() || g.features_per_split.is_empty() {
                return Err(Error::Config("grid axes must be non-empty".into()));
            }
            if g.n_trees.contains(&0) {
                return Err(Error::Config("grid n_trees must be >= 1".into()));
            }
            if !(g.holdout_fraction > 0.0 && g.holdout_fraction < 1.0) {
                return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Leaf(u8),
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f32]) -> u8 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(c) => return c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature as usize] <= threshold { left } else { right } as usize,
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(t, left as usize).max(go(t, right as usize)),
            }
        }
        go(self, 0)
    }
}

/// Row-major pixel samples.
#[derive(Debug, Clone)]
pub struct Samples {
    pub x: Vec<f32>,
    pub y: Vec<u8>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }
}

pub(crate) fn argmax_lowest(counts: &[u64]) -> u8 {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

struct Builder<'a> {
    data: &'a Samples,
    max_depth: usize,
    mtry: usize,
    min_split: usize,
}

impl Builder<'_> {
    fn counts(&self, idx: &[u32]) -> Vec<u64> {
        let mut c = vec![0u64; self.data.n_classes];
        for &i in idx {
            c[self.data.y[i as usize] as usize] += 1;
        }
        c
    }

    /// Best (feature, threshold) among the candidates; maximizes the Gini
    /// purity score `Σ cl²/nl + Σ cr²/nr`, first candidate wins ties.
    fn best_split(&self, idx: &[u32], features: &[usize], total: &[u64]) -> Option<(usize, f32)> {
        let n = idx.len() as u64;
        let mut best: Option<(f64, usize, f32)> = None;
        let mut pairs: Vec<(f32, u8)> = Vec::with_capacity(idx.len());
        for &f in features {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| {
                let i = i as usize;
                (self.data.x[i * self.data.n_features + f], self.data.y[i])
            }));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0u64; total.len()];
            let mut sq_left = 0.0f64;
            let mut sq_right: f64 = total.iter().map(|&c| (c * c) as f64).sum();
            for k in 0..pairs.len() - 1 {
                let c = pairs[k].1 as usize;
                // incremental update of Σ c² on both sides
                sq_left += (2 * left[c] + 1) as f64;
                sq_right -= (2 * (total[c] - left[c]) - 1) as f64;
                left[c] += 1;
                let (a, b) = (pairs[k].0, pairs[k + 1].0);
                if a == b {
                    continue;
                }
                let nl = (k + 1) as u64;
                let score = sq_left / nl as f64 + sq_right / (n - nl) as f64;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let mut thr = (a as f64 + (b as f64 - a as f64) / 2.0) as f32;
                    if thr >= b || thr < a {
                        thr = a;
                    }
                    best = Some((score, f, thr));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn build(&self, root: Vec<u32>, rng: &mut ChaCha8Rng) -> Tree {
        let mut nodes = vec![Node::Leaf(0)];
        let mut stack = vec![(0usize, root, 0usize)];
        let d = self.data.n_features;
        while let Some((slot, idx, depth)) = stack.pop() {
            let counts = self.counts(&idx);
            let majority = argmax_lowest(&counts);
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            if pure || depth >= self.max_depth || idx.len() < self.min_split {
                nodes[slot] = Node::Leaf(majority);
                continue;
            }
            let mut features: Vec<usize> = if self.mtry >= d {
                (0..d).collect()
            } else {
                index::sample(rng, d, self.mtry).into_vec()
            };
            features.sort_unstable();
            let Some((f, thr)) = self.best_split(&idx, &features, &counts) else {
                nodes[slot] = Node::Leaf(majority);
                continue;
            };
            let (l, r): (Vec<u32>, Vec<u32>) = idx
                .iter()
                .partition(|&&i| self.data.x[i as usize * d + f] <= thr);
            debug_assert!(!l.is_empty() && !r.is_empty());
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf(0));
            nodes.push(Node::Leaf(0));
            nodes[slot] = Node::Split {
                feature: f as u32,
                threshold: thr,
                left: li as u32,
                right: ri as u32,
            };
            stack.push((ri, r, depth + 1));
            stack.push((li, l, depth + 1));
        }
        Tree { nodes }
    }
}

fn tree_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(t as u64 + 1);
    r
}

/// Fits trees on pre-collected samples.
pub fn fit_trees(data: &Samples, cfg: &RfConfig) -> Result<Vec<Tree>> {
    cfg.validate()?;
    let present = {
        let mut seen = vec![false; data.n_classes];
        data.y.iter().for_each(|&c| seen[c as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::Degenerate("training data contains a single class".into()));
    }
    let builder = Builder {
        data,
        max_depth: cfg.max_depth.unwrap_or(usize::MAX),
        mtry: cfg.features_per_split.resolve(data.n_features),
        min_split: cfg.min_samples_split,
    };
    let n = data.len();
    Ok((0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(cfg.seed, t);
            let idx: Vec<u32> = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            builder.build(idx, &mut rng)
        })
        .collect())
}

/// Pixel samples from aligned feature maps and masks, optionally subsampled per image.
pub fn collect_samples(
    features: &[&FeatureMap],
    masks: &[&LabelMask],
    max_per_image: Option<usize>,
    seed: u64,
) -> Result<Samples> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::shape(
            format!("{} masks", features.len()),
            format!("{} masks", masks.len()),
        ));
    }
    let d = features[0].channels();
    let n_classes = masks[0].n_classes();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, (f, m)) in features.iter().zip(masks).enumerate() {
        if f.channels() != d {
            return Err(Error::shape(format!("{d} channels"), format!("{} channels", f.channels())));
        }
        if (f.height(), f.width()) != m.dim() {
            return Err(Error::shape(format!("{:?}", m.dim()), format!("{:?}", (f.height(), f.width()))));
        }
        if m.palette() != masks[0].palette() {
            return Err(Error::invalid("training masks use different palettes"));
        }
        let hw = f.height() * f.width();
        let picks: Vec<usize> = match max_per_image {
            Some(cap) if cap < hw => {
                let mut rng = tree_rng(seed ^ 0x5eed, i);
                let mut p = index::sample(&mut rng, hw, cap).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..hw).collect(),
        };
        let w = f.width();
        for p in picks {
            let (py, px) = (p / w, p % w);
            x.extend(f.pixel(py, px).iter());
            y.push(m.labels()[[py, px]]);
        }
    }
    Ok(Samples {
        x,
        y,
        n_features: d,
        n_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub features_per_split: FeaturesPerSplit,
    pub holdout_iou: f64,
}

#[derive(Debug, Clone)]
pub struct RfModel {
    trees: Vec<Tree>,
    n_features: usize,
    palette: Arc<ClassPalette>,
    /// Configuration of the trained forest (the selected grid point, if searched).
    pub config: RfConfig,
    pub grid_results: Vec<GridPoint>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    n_features: usize,
    n_trees: usize,
    palette: ClassPalette,
    config: RfConfig,
    grid_results: Vec<GridPoint>,
}

const MAGIC: &[u8; 8] = b"RSRF\0\0\0\x01";

impl RfModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn palette(&self) -> &ClassPalette {
        &self.palette
    }

    pub fn predict_row(&self, x: &[f32]) -> u8 {
        let mut votes = vec![0u64; self.palette.len()];
        for t in &self.trees {
            votes[t.predict(x) as usize] += 1;
        }
        argmax_lowest(&votes)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the binary forest and a `<path>.json` sidecar with hyperparameters.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [self.n_features, self.palette.len(), self.trees.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in &self.trees {
            buf.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            for n in &t.nodes {
                match *n {
                    Node::Leaf(c) => buf.extend_from_slice(&[0, c]),
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        buf.push(1);
                        buf.extend_from_slice(&feature.to_le_bytes());
                        buf.extend_from_slice(&threshold.to_le_bytes());
                        buf.extend_from_slice(&left.to_le_bytes());
                        buf.extend_from_slice(&right.to_le_bytes());
                    }
                }
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        let side = Sidecar {
            format: "rockseg-random-forest-v1".into(),
            n_features: self.n_features,
            n_trees: self.trees.len(),
            palette: (*self.palette).clone(),
            config: self.config.clone(),
            grid_results: self.grid_results.clone(),
        };
        fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { b: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("not a random-forest file".into()));
        }
        let (d, c, nt) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        if d != side.n_features || c != side.palette.len() || nt != side.n_trees {
            return Err(Error::Format("binary header disagrees with sidecar".into()));
        }
        let mut trees = Vec::with_capacity(nt);
        for _ in 0..nt {
            let nn = cur.u32()? as usize;
            let mut nodes = Vec::with_capacity(nn);
            for _ in 0..nn {
                let node = match cur.take(1)?[0] {
                    0 => Node::Leaf(cur.take(1)?[0]),
                    1 => Node::Split {
                        feature: cur.u32()?,
                        threshold: f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")),
                        left: cur.u32()?,
                        right: cur.u32()?,
                    },
                    t => return Err(Error::Format(format!("bad node tag {t}"))),
                };
                match node {
                    Node::Leaf(cl) if cl as usize >= c => return Err(Error::Format("leaf class out of range".into())),
                    Node::Split { feature, left, right, .. }
                        if feature as usize >= d || left as usize >= nn || right as usize >= nn =>
                    {
                        return Err(Error::Format("split references out of range".into()))
                    }
                    _ => {}
                }
                nodes.push(node);
            }
            trees.push(Tree { nodes });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self {
            trees,
            n_features: d,
            palette: Arc::new(side.palette),
            config: side.config,
            grid_results: side.grid_results,
        })
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn fit_model(features: &[&FeatureMap], masks: &[&LabelMask], cfg: &RfConfig) -> Result<RfModel> {
    let data = collect_samples(features, masks, cfg.max_pixels_per_image, cfg.seed)?;
    Ok(RfModel {
        trees: fit_trees(&data, cfg)?,
        n_features: data.n_features,
        palette: masks[0].palette_arc(),
        config: RfConfig { grid: None, ..cfg.clone() },
        grid_results: Vec::new(),
    })
}

/// Trains a forest. With a grid, every point is scored by mean IoU on a
/// held-out fraction of the slices and the best is retrained on all of them.
pub fn rf_train(features: &[FeatureMap], masks: &[LabelMask], cfg: &RfConfig) -> Result<RfModel> {
    cfg.validate()?;
    let f: Vec<&FeatureMap> = features.iter().collect();
    let m: Vec<&LabelMask> = masks.iter().collect();
    let Some(grid) = &cfg.grid else {
        return fit_model(&f, &m, cfg);
    };
    if features.len() < 2 {
        return Err(Error::Config("grid search needs at least two training slices".into()));
    }
    let n_hold = ((features.len() as f64 * grid.holdout_fraction).round() as usize).clamp(1, features.len() - 1);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let (hold, fit) = order.split_at(n_hold);
    let fit_f: Vec<&FeatureMap> = fit.iter().map(|&i| &features[i]).collect();
    let fit_m: Vec<&LabelMask> = fit.iter().map(|&i| &masks[i]).collect();

    let mut results = Vec::new();
    for &n_trees in &grid.n_trees {
        for &max_depth in &grid.max_depth {
            for &fps in &grid.features_per_split {
                let point = RfConfig {
                    n_trees,
                    max_depth,
                    features_per_split: fps,
                    grid: None,
                    ..cfg.clone()
                };
                let model = fit_model(&fit_f, &fit_m, &point)?;
                let mut cm = ConfusionMatrix::zeros(model.palette.len());
                for &i in hold {
                    cm.merge(&crate::metrics::confusion_matrix(&rf_predict(&model, &features[i])?, &masks[i])?)?;
                }
                results.push(GridPoint {
                    n_trees,
                    max_depth,
                    features_per_split: fps,
                    holdout_iou: cm.mean_iou(),
                });
            }
        }
    }
    let best = results
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if p.holdout_iou > results[b].holdout_iou { i } else { b });
    let chosen = RfConfig {
        n_trees: results[best].n_trees,
        max_depth: results[best].max_depth,
        features_per_split: results[best].features_per_split,
        grid: None,
        ..cfg.clone()
    };
    let mut model = fit_model(&f, &m, &chosen)?;
    model.grid_results = results;
    Ok(model)
}

pub fn rf_predict(model: &RfModel, features: &FeatureMap) -> Result<LabelMask> {
    if features.channels() != model.n_features {
        return Err(Error::shape(
            format!("{} feature channels", model.n_features),
            format!("{} feature channels", features.channels()),
        ));
    }
    let (h, w, _) = features.dim();
    let labels: Vec<u8> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let px = features.pixel(p / w, p % w);
            match px.as_slice() {
                Some(s) => model.predict_row(s),
                None => model.predict_row(&px.to_vec()),
            }
        })
        .collect();
    LabelMask::new(
        Array2::from_shape_vec((h, w), labels).expect("h*w labels"),
        model.palette.clone(),
    )
}

impl Samples {
    /// Training-set accuracy of a forest on these samples.
    pub fn accuracy(&self, model: &RfModel) -> f64 {
        let hits = (0..self.len())
            .filter(|&i| model.predict_row(self.row(i)) == self.y[i])
            .count();
        hits as f64 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy() -> (FeatureMap, LabelMask) {
        // feature 0 separates the classes, feature 1 is noise
        let v = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| {
            if c == 0 {
                (y * 4 + x) as f32
            } else {
                ((y * 7 + x * 3) % 5) as f32
            }
        });
        let labels = Array2::from_shape_fn((4, 4), |(y, x)| u8::from(y * 4 + x >= 6));
        (
            FeatureMap::new(v, "toy").unwrap(),
            LabelMask::new(labels, ClassPalette::indexed(2).unwrap()).unwrap(),
        )
    }

    fn single_tree() -> RfConfig {
        RfConfig {
            n_trees: 1,
            max_depth: None,
            features_per_split: FeaturesPerSplit::All,
            bootstrap: false,
            max_pixels_per_image: None,
            ..Default::default()
        }
    }

    #[test]
    fn separable_fits_exactly() {
        let (f, m) = toy();
        let model = rf_train(&[f.clone()], &[m.clone()], &single_tree()).unwrap();
        assert_eq!(rf_predict(&model, &f).unwrap(), m);
        assert_eq!(model.trees()[0].depth(), 1);
        if let Node::Split { feature, threshold, .. } = model.trees()[0].nodes[0] {
            assert_eq!((feature, threshold), (0, 5.5));
        } else {
            panic!("root must split");
        }
    }

    #[test]
    fn single_class_rejected() {
        let (f, m) = toy();
        let m = m.with_labels(Array2::zeros((4, 4))).unwrap();
        assert!(matches!(rf_train(&[f], &[m], &single_tree()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let (f, m) = toy();
        let model = rf_train(&[f], &[m], &single_tree()).unwrap();
        let other = FeatureMap::new(Array3::zeros((4, 4, 3)), "x").unwrap();
        assert!(rf_predict(&model, &other).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (f, m) = toy();
        let cfg = RfConfig {
            n_trees: 5,
            max_pixels_per_image: None,
            ..Default::default()
        };
        let model = rf_train(&[f.clone()], &[m], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.rf");
        model.save(&p).unwrap();
        let back = RfModel::load(&p).unwrap();
        assert_eq!(back.trees, model.trees);
        assert_eq!(rf_predict(&back, &f).unwrap(), rf_predict(&model, &f).unwrap());
        fs::write(&p, b"garbage").unwrap();
        assert!(RfModel::load(&p).is_err());
    }

    #[test]
    fn vote_tie_goes_to_lowest() {
        assert_eq!(argmax_lowest(&[2, 2, 1]), 0);
        assert_eq!(argmax_lowest(&[0, 3, 3]), 1);
    }
}
