//! Experiment orchestration: a common method interface, split runners,
//! sweeps over training-set size and seeds, and run bookkeeping.

pub mod method;
pub mod record;
pub mod runs;

pub use method::{
    match_resolution, view_pair, ConstantPredictor, Extractor, FinetuneSeg, FeatureSource, FitInfo, MethodSpec, SegMethod, MODEL_FILE,
};
pub use record::{
    aggregate, config_hash, mean_std, results_csv, Aggregate, RunRecord, RunStore, LEDGER_FILE, REPORT_FILE,
    RESULTS_FILE,
};
pub use runs::{
    check_no_leak, classification_view, evaluate_on, fit_and_evaluate, point_config, knn_accuracy, run_ablation, run_classical, run_classification, run_point,
    run_probing, run_sweep, AblationSpec, ClassicalTable, ClassificationCell, ClassificationSpec, ProbingSpec,
    PredictionSink, SweepResult, SweepSpec, DEFAULT_N_TRAIN_GRID,
};
