//! Scenario configs, orchestration and metric summaries.

pub mod config;
pub mod metrics;
pub mod runner;

pub use config::{PetConfig, PetEval, Scenario, ScenarioFile, Scheme};
pub use metrics::{
    percentile_nearest_rank, summarize_fct, summarize_queue, summarize_regimes, Bucket, FctStats, QueueSummary,
    RegimeSummary, FCT_HEADER, QUEUE_HEADER,
};
pub use runner::{
    evaluate_checkpoint, run_ablation, run_experiment, summarize_dir, JobSummary, RunOptions, PARTIAL_MARKER,
};
