//! Run records, the append-only run ledger and aggregate tables.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{csv_escape, EvalReport};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn code_version() -> String {
    format!("rockseg {}", env!("CARGO_PKG_VERSION"))
}

/// SHA-256 over the canonical JSON of (method config, n_train, seed, code version).
pub fn config_hash(method_config: &serde_json::Value, n_train: usize, seed: u64) -> String {
    // serde_json maps are key-sorted, so the encoding is canonical
    let key = serde_json::json!({
        "method": method_config,
        "n_train": n_train,
        "seed": seed,
        "version": code_version(),
    });
    let mut h = Sha256::new();
    h.update(key.to_string().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub method_config: serde_json::Value,
    pub n_train: usize,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub device: String,
    pub wall_clock_s: f64,
    pub n_trainable: Option<usize>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fit_details: serde_json::Value,
    pub report: EvalReport,
}

/// One table row: a method at one training size over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n_train: usize,
    pub n_seeds: usize,
    pub mean_iou: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_iou: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub n_trainable: Option<usize>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Groups records by (method, n_train), ordered by method then size.
pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.n_train)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, n_train), rs)| {
            let mut per_seed: Vec<(u64, f64)> = rs.iter().map(|r| (r.seed, r.report.mean_iou)).collect();
            per_seed.sort_by_key(|p| p.0);
            let vals: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            let (mean_iou, std_iou) = mean_std(&vals);
            Aggregate {
                method,
                n_train,
                n_seeds: rs.len(),
                mean_iou,
                std_iou,
                per_seed,
                n_trainable: rs.iter().find_map(|r| r.n_trainable),
            }
        })
        .collect()
}

pub fn results_csv(rows: &[Aggregate]) -> String {
    let mut s = String::from("method,n_train,n_seeds,mean_iou,std_iou,n_trainable\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            csv_escape(&r.method),
            r.n_train,
            r.n_seeds,
            r.mean_iou,
            r.std_iou,
            r.n_trainable.map_or(String::new(), |n| n.to_string())
        ));
    }
    s
}

/// `runs/` directory: one subdirectory per config hash plus the shared ledger.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

/// Writes via a temporary file and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, hash: &str) -> PathBuf {
        self.root.join(hash)
    }

    pub fn load(&self, hash: &str) -> Result<Option<RunRecord>> {
        let p = self.run_dir(hash).join(REPORT_FILE);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }

    /// Stores `report.json` and appends one ledger line.
    pub fn save(&self, rec: &RunRecord) -> Result<PathBuf> {
        let dir = self.run_dir(&rec.config_hash);
        write_atomic(&dir.join(REPORT_FILE), serde_json::to_string_pretty(rec)?.as_bytes())?;
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        // a single write of one line on an O_APPEND handle
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(LEDGER_FILE))?;
        f.write_all(line.as_bytes())?;
        Ok(dir)
    }

    pub fn ledger(&self) -> Result<Vec<RunRecord>> {
        let p = self.root.join(LEDGER_FILE);
        if !p.is_file() {
            return Ok(Vec::new());
        }
        fs::read_to_string(p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("ledger line {}: {e}", i + 1))))
            .collect()
    }

    pub fn write_results(&self, rows: &[Aggregate]) -> Result<PathBuf> {
        let p = self.root.join(RESULTS_FILE);
        write_atomic(&p, results_csv(rows).as_bytes())?;
        Ok(p)
    }
}
