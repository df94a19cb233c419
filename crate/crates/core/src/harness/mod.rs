//! Experiment driver: configs, method dispatch, metrics files, comparisons
//! and gradient-check suites.
//!
//! Configs are TOML. Every field has a default, so this is a complete
//! config for the FedAvg baseline:
//!
//! ```toml
//! method = "fedavg"
//! rounds = 30
//! ```
//!
//! Metrics CSVs start with the full config as `#` comment lines, followed by
//! the header `round,client_id,split,loss,accuracy,method,seed` and one row
//! per round, client and split.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod sim;

pub use compare::{compare, mean_std, sweep_seq_len, sweep_warmup, write_comparison, Comparison, CurveRow, SummaryRow};
pub use config::{
    dispatch_variant, DataSection, ExperimentConfig, LearnerSection, LocalSection, Method, ModelSection,
    OutputSection, Wiring,
};
pub use gradcheck::{gradcheck, run_suite, GradcheckOptions, GradcheckReport, Suite, SuiteReport};
pub use sim::{
    final_test_accuracy, log_has_learner, mean_test_accuracy, metrics_path, read_metrics, run_experiment, run_rows,
    test_curve, write_metrics, RoundMetrics, RunOutput, Simulation, SimulationCheckpoint, Split, METRICS_HEADER,
};

#[cfg(test)]
mod tests;
