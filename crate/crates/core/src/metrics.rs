//! IoU and confusion-matrix evaluation.
//!
//! Mean IoU is the unweighted mean over the classes that occur in the
//! ground truth. A class present only in the prediction still gets a
//! per-class IoU of 0 but does not enter the mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMask;

/// Square count matrix; entry `(i, j)` counts pixels with GT `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self {
            n,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, count: u64) {
        self.counts[gt * self.n + pred] += count;
    }

    /// Accumulates another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape(self.n, other.n));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.n..(gt + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, pred)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Each row divided by its GT count. Rows for absent classes stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let s = self.row_sum(i);
                (0..self.n)
                    .map(|j| if s == 0 { 0.0 } else { self.get(i, j) as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// Per-class IoU; `None` when the class is absent from both GT and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_ = self.row_sum(c) - tp;
                let fp = self.col_sum(c) - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Macro mean over classes with at least one GT pixel.
    pub fn mean_iou(&self) -> f64 {
        let ious = self.per_class_iou();
        let present: Vec<f64> = (0..self.n)
            .filter(|&c| self.row_sum(c) > 0)
            .map(|c| ious[c].unwrap_or(0.0))
            .collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn confusion_matrix(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionMatrix> {
    check_pair(pred, gt)?;
    let n = gt.n_classes();
    let mut cm = ConfusionMatrix::zeros(n);
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        cm.counts[g as usize * n + p as usize] += 1;
    }
    Ok(cm)
}

fn check_pair(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let (h, w) = gt.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty mask"));
    }
    if pred.palette() != gt.palette() {
        return Err(Error::invalid("prediction and GT use different palettes"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_name: String,
    pub n_train_images: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(
        confusion: ConfusionMatrix,
        class_names: Vec<String>,
        method_name: impl Into<String>,
        n_train_images: usize,
        seed: u64,
    ) -> Result<Self> {
        if class_names.len() != confusion.n_classes() {
            return Err(Error::shape(confusion.n_classes(), class_names.len()));
        }
        Ok(Self {
            method_name: method_name.into(),
            n_train_images,
            seed,
            class_names,
            per_class_iou: confusion.per_class_iou(),
            mean_iou: confusion.mean_iou(),
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("method,n_train_images,seed,mean_iou");
        for name in &self.class_names {
            let _ = write!(h, ",iou_{name}");
        }
        h
    }

    /// Flat CSV row matching [`EvalReport::csv_header`]. Absent classes are empty cells.
    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{:.6}",
            csv_escape(&self.method_name),
            self.n_train_images,
            self.seed,
            self.mean_iou
        );
        for v in &self.per_class_iou {
            match v {
                Some(v) => {
                    let _ = write!(row, ",{v:.6}");
                }
                None => row.push(','),
            }
        }
        row
    }
}

pub(crate) fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates one prediction against its GT.
pub fn iou(pred: &LabelMask, gt: &LabelMask) -> Result<EvalReport> {
    let cm = confusion_matrix(pred, gt)?;
    EvalReport::from_confusion(cm, gt.palette().names().to_vec(), "", 0, 0)
}
