//! Scoring, detection metrics and system comparisons.

pub mod experiment;
pub mod metrics;
pub mod scoring;

pub use experiment::{
    all_pairs_trials, average_by_system, results_csv, run_experiment, run_systems, ExperimentConfig, ModelSpec,
    SystemResult,
};
pub use metrics::{compute_eer, compute_metrics, compute_min_dcf, CostModel, DetMetrics, OperatingPoint};
pub use scoring::{cosine_score, embed_all, score_trials};
