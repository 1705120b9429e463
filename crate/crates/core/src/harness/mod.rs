//! Experiment orchestration: configuration, the synchronous round loop,
//! baselines, JSONL metrics, seed sweeps and reports.

mod config;
pub mod metrics;
pub mod report;
mod run;
pub mod sweep;

pub use config::{ExperimentConfig, Method};
pub use run::{
    build_domains, client_seed, effective_env_specs, evaluate, initial_params, l1_trend, ols_slope, run_experiment,
    run_experiment_with, run_rotation, RoundMetrics, RunOptions, RunResult, Simulation,
};
pub use sweep::{run_sweep, seed_sweep, SweepSummary};
