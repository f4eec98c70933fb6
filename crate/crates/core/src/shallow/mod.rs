//! Shallow learners: random forest pixel classifier and kNN.

pub mod forest;
pub mod knn;

pub use forest::{
    collect_samples, fit_trees, rf_predict, rf_train, FeaturesPerSplit, GridPoint, RfConfig, RfGrid, RfModel,
    Samples, Tree,
};
pub use knn::{
    knn_classify_images, knn_probe_segmentation, probe_features, probe_mask, KnnConfig, KnnIndex, KnnProbe,
    KnnTask, Metric,
};
