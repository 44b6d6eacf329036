//! Experiment orchestration, metrics and the command-line entry points.

mod config;
mod experiment;
mod gradcheck;
mod metrics;

pub use config::{
    AdapterSettings, DataSettings, EvalSettings, ExperimentConfig, FederationSettings, PartitionSettings, PretrainSettings,
    TrainSettings,
};
pub use experiment::{
    build_plan, client_seed, client_splits, evaluate_client, evaluate_split, execute, partition_plan, prepare, report,
    run_experiment, seed_dir, summarize, ClientSplits, EvalCache, ExperimentSummary, Prepared, RunRecord, RunSummary, SplitMeans,
    COMM_FILE, CONFIG_ECHO_FILE, DIGEST_FILE, FAILED_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use gradcheck::{gradcheck_suite, gradcheck_trial, GradcheckConfig, GradcheckSummary, TrialReport};
pub use metrics::{
    comm_csv, harmonic_mean, metrics_csv, parse_comm_csv, parse_metrics_csv, scores_at, ClientScore, MetricsRow, Scores, Split,
    COMM_HEADER, METRICS_HEADER,
};
