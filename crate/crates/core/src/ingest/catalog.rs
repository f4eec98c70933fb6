//! Dataset catalog and train/test split policy.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_mask, load_slice};
use crate::error::{Error, Result};
use crate::types::{ClassPalette, GraySlice, LabelMask};

pub const CARBONATES: &str = "carbonates";
pub const CARBONATES_SAMPLES: [&str; 3] = ["S1", "S2", "S3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub id: String,
    pub role: SampleRole,
    pub image_dir: PathBuf,
    #[serde(default)]
    pub gt_dir: Option<PathBuf>,
    pub palette: String,
    /// Class of every slice of a classification sample; defaults to `id`.
    #[serde(default)]
    pub label: Option<String>,
}

/// Human-readable (TOML) listing of samples, their roles and palettes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCatalog {
    pub dataset: String,
    /// Base for relative directories; defaults to the catalog file's folder.
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub palettes: BTreeMap<String, ClassPalette>,
    pub samples: Vec<CatalogEntry>,
}

/// One slice on disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub sample_id: String,
    pub index: usize,
    pub image_path: PathBuf,
    pub gt_path: Option<PathBuf>,
}

impl SliceRef {
    pub fn id(&self) -> String {
        format!("{}#{}", self.sample_id, self.index)
    }

    pub fn load(&self) -> Result<GraySlice> {
        load_slice(&self.image_path, &self.sample_id, self.index)
    }

    pub fn load_mask(&self, palette: Arc<ClassPalette>) -> Result<LabelMask> {
        let p = self
            .gt_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("slice {} has no GT", self.id())))?;
        load_mask(p, palette)
    }
}

impl DatasetCatalog {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: DatasetCatalog = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| Error::MissingDataset {
            path: path.to_path_buf(),
            hint: "create a catalog listing each sample's image_dir, gt_dir, role and palette".into(),
        })?;
        let mut c = Self::from_toml(&text)?;
        if c.root.is_none() {
            c.root = path.parent().map(Path::to_path_buf);
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.samples {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id {:?}", e.id)));
            }
            let pal = self
                .palettes
                .get(&e.palette)
                .ok_or_else(|| Error::Config(format!("sample {} references unknown palette {:?}", e.id, e.palette)))?;
            match e.role {
                SampleRole::Segmentation if e.gt_dir.is_none() => {
                    return Err(Error::Config(format!("segmentation sample {} has no gt_dir", e.id)));
                }
                SampleRole::Classification => {
                    let label = e.label.as_deref().unwrap_or(&e.id);
                    if pal.index_of(label).is_none() {
                        return Err(Error::Config(format!(
                            "classification sample {} has label {label:?} missing from palette {:?}",
                            e.id, e.palette
                        )));
                    }
                }
                _ => {}
            }
        }
        if self.dataset == CARBONATES {
            let seg: Vec<&str> = self
                .samples
                .iter()
                .filter(|e| e.role == SampleRole::Segmentation)
                .map(|e| e.id.as_str())
                .collect();
            let mut sorted = seg.clone();
            sorted.sort_unstable();
            if sorted != CARBONATES_SAMPLES {
                return Err(Error::Config(format!(
                    "carbonates catalog must expose exactly S1, S2, S3; found {seg:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&CatalogEntry> {
        self.samples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Config(format!("unknown sample {id:?}")))
    }

    pub fn palette_of(&self, id: &str) -> Result<Arc<ClassPalette>> {
        let e = self.entry(id)?;
        Ok(Arc::new(self.palettes[&e.palette].clone()))
    }

    /// Class index of a classification sample within its palette.
    pub fn class_of(&self, id: &str) -> Result<u8> {
        let e = self.entry(id)?;
        let label = e.label.as_deref().unwrap_or(&e.id);
        self.palettes[&e.palette]
            .index_of(label)
            .ok_or_else(|| Error::Config(format!("label {label:?} missing from palette")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Slices of a sample in lexicographic filename order.
    pub fn slices(&self, id: &str) -> Result<Vec<SliceRef>> {
        let e = self.entry(id)?;
        let dir = self.resolve(&e.image_dir);
        if !dir.is_dir() {
            return Err(Error::MissingDataset {
                path: dir,
                hint: format!(
                    "sample {id}: download the raw scans and run `rockseg convert` into this directory"
                ),
            });
        }
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|d| d.ok())
            .map(|d| d.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".npy"))
            .collect();
        names.sort();
        let gt_dir = e.gt_dir.as_ref().map(|g| self.resolve(g));
        names
            .into_iter()
            .enumerate()
            .map(|(index, name)| {
                let gt_path = match &gt_dir {
                    Some(g) => {
                        let p = g.join(&name);
                        if !p.is_file() {
                            return Err(Error::MissingDataset {
                                path: p,
                                hint: format!("every image slice of {id} needs a GT file of the same name"),
                            });
                        }
                        Some(p)
                    }
                    None => None,
                };
                Ok(SliceRef {
                    sample_id: id.to_string(),
                    index,
                    image_path: dir.join(&name),
                    gt_path,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_samples: Vec<String>,
    pub test_samples: Vec<String>,
    pub n_train_images: usize,
    /// Cap on test slices (uniform draw); all test slices when unset.
    #[serde(default)]
    pub n_test_images: Option<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_samples.is_empty() {
            return Err(Error::Config("split needs at least one training sample".into()));
        }
        let train: HashSet<&String> = self.train_samples.iter().collect();
        if let Some(s) = self.test_samples.iter().find(|s| train.contains(s)) {
            return Err(Error::Config(format!("sample {s} is in both train and test sets")));
        }
        Ok(())
    }

    /// Per-sample draw counts: as even as possible, earlier samples take the remainder.
    pub fn per_sample_counts(&self) -> Vec<usize> {
        let m = self.train_samples.len();
        let base = self.n_train_images / m;
        let extra = self.n_train_images % m;
        (0..m).map(|i| base + usize::from(i < extra)).collect()
    }
}

fn draw(slices: &[SliceRef], count: usize, rng: &mut ChaCha8Rng) -> Vec<SliceRef> {
    let mut idx: Vec<usize> = (0..slices.len()).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| slices[i].clone()).collect()
}

fn sample_rng(seed: u64, position: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(position as u64 + 1)))
}

/// Segmentation split: uniform draw without replacement from each training
/// sample; test slices come only from the test samples.
pub fn make_split(catalog: &DatasetCatalog, spec: &SplitSpec) -> Result<(Vec<SliceRef>, Vec<SliceRef>)> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.n_train_images);
    for (pos, (sample, count)) in spec.train_samples.iter().zip(spec.per_sample_counts()).enumerate() {
        let slices = catalog.slices(sample)?;
        if count > slices.len() {
            return Err(Error::Oversubscribed {
                sample: sample.clone(),
                requested: count,
                available: slices.len(),
            });
        }
        train.extend(draw(&slices, count, &mut sample_rng(spec.seed, pos)));
    }
    let mut pool = Vec::new();
    for s in &spec.test_samples {
        pool.extend(catalog.slices(s)?);
    }
    let test = match spec.n_test_images {
        Some(n) if n < pool.len() => draw(&pool, n, &mut sample_rng(spec.seed, usize::MAX - 1)),
        Some(n) if n > pool.len() => {
            return Err(Error::Oversubscribed {
                sample: spec.test_samples.join("+"),
                requested: n,
                available: pool.len(),
            })
        }
        _ => pool,
    };
    Ok((train, test))
}

/// Classification split: `n_images` drawn uniformly from all classification
/// samples, shuffled, first `train_fraction` used for training.
pub fn make_classification_split(
    catalog: &DatasetCatalog,
    n_images: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SliceRef>, Vec<SliceRef>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut pool = Vec::new();
    for e in catalog.samples.iter().filter(|e| e.role == SampleRole::Classification) {
        pool.extend(catalog.slices(&e.id)?);
    }
    if n_images > pool.len() {
        return Err(Error::Oversubscribed {
            sample: "classification pool".into(),
            requested: n_images,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n_images);
    let n_train = (n_images as f64 * train_fraction).round() as usize;
    let test = pool.split_off(n_train);
    Ok((pool, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAT: &str = r#"
dataset = "carbonates"

[palettes.carbonates]
names = ["crude_oil", "brine", "rock_matrix"]

[[samples]]
id = "S1"
role = "segmentation"
image_dir = "S1/images"
gt_dir = "S1/gt"
palette = "carbonates"

[[samples]]
id = "S2"
role = "segmentation"
image_dir = "S2/images"
gt_dir = "S2/gt"
palette = "carbonates"

[[samples]]
id = "S3"
role = "segmentation"
image_dir = "S3/images"
gt_dir = "S3/gt"
palette = "carbonates"
"#;

    #[test]
    fn parses_and_validates() {
        let c = DatasetCatalog::from_toml(CAT).unwrap();
        assert_eq!(c.samples.len(), 3);
        let again = DatasetCatalog::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn carbonates_requires_three_samples() {
        let cut = CAT.rsplit_once("[[samples]]").unwrap().0;
        assert!(DatasetCatalog::from_toml(cut).is_err());
    }

    #[test]
    fn segmentation_needs_gt() {
        let bad = CAT.replacen("gt_dir = \"S1/gt\"\n", "", 1);
        assert!(DatasetCatalog::from_toml(&bad).is_err());
    }

    #[test]
    fn per_sample_counts_are_ceil_floor() {
        let mut s = SplitSpec {
            train_samples: vec!["S1".into(), "S2".into()],
            test_samples: vec!["S3".into()],
            n_train_images: 5,
            n_test_images: None,
            seed: 0,
        };
        assert_eq!(s.per_sample_counts(), vec![3, 2]);
        s.n_train_images = 1200;
        assert_eq!(s.per_sample_counts(), vec![600, 600]);
        s.test_samples = vec!["S1".into()];
        assert!(s.validate().is_err());
    }
}
