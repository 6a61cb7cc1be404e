//! Training, cross-validation, evaluation and the domain probe.

mod adam;
mod config;
mod evaluate;
mod experiment;
mod folds;
mod probe;
mod suite;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{ExperimentConfig, TrainConfig, CONFIG_KEYS};
pub use evaluate::{evaluate, evaluate_subject, mean_dsc, predict_volume, EvalSettings, Segmenter};
pub use folds::{folds_csv, make_folds, FoldPlan};
pub use probe::{latent_features, probe_accuracy, probe_domain_accuracy, ProbeConfig};
pub use suite::{end_to_end_check, gradcheck_suite, toy_spec, SUITE_TOL};
pub use train::{
    grid_search_lambda, train_model, DomainMap, EpochRecord, StepLosses, StepRecord, TrainHistory, Trainer,
};
pub use experiment::{
    load_dataset, load_session, parallel_map, plan_folds, read_metrics_csv, run_evaluation, run_report,
    run_training, synthesize, ExperimentReport, Layout, ProbeResult, Session, VariantSummary, AGGREGATION,
};
