//! Experiment orchestration: configs, runs, overlap sweeps, verification
//! suites and result files.

pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;
pub mod verify;

pub use config::{parse_key_value, ExperimentConfig, OUTPUT_DIR_ENV};
pub use experiment::{
    evaluation_histories, run_experiment, summarize, true_effect, ExperimentResult, ResultRecord,
    SummaryRow,
};
pub use output::{emit_results, emit_summary, format_summary, OutputFormat};
pub use sweep::{emit_sweep, overlap_sweep, SweepPoint, SweepRecord, SweepResult};
pub use verify::{verify, Budget, Check, Suite, VerifyReport};
