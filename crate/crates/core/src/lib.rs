//! Segmentation and classification toolkit for micro-CT rock imagery.
//!
//! The crate groups training-free segmenters (multiclass Otsu, K-means,
//! fuzzy C-means), shallow learners on hand-engineered pixel features
//! (random forest, kNN), a vision-transformer backbone with LoRA adapters,
//! 4-bit weight quantization and lightweight segmentation heads, and the
//! experiment harness that evaluates all of them through one IoU report.

pub mod bench;
pub mod classical;
pub mod config;
pub mod error;
pub mod ingest;
pub mod interpret;
pub mod metrics;
pub mod neural;
pub mod preprocess;
pub mod shallow;
pub mod types;

pub use error::{Error, Result};
pub use metrics::{confusion_matrix, iou, ConfusionMatrix, EvalReport};
pub use types::{ClassPalette, FeatureMap, GraySlice, LabelMask, Rgb};
