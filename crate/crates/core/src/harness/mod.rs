//! Training, evaluation, metrics and the experiments built on them.

mod config;
mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod probes;
mod train;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use experiments::{
    ablate, ablation_csv, ablation_table, run_seeds, sweep_csv, sweep_intents, AblationRow, SeedRuns, SweepRow,
};
pub use gradcheck::{grad_check_suite, GradCheckSuite, NamedReport};
pub use metrics::{accuracy, auc, f1, MetricsReport};
pub use train::{evaluate, load_or_generate, summary, train, write_corpus, EpochLog, TrainOutcome};
