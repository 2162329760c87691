//! Experiment configuration, evaluation, the experiment families and their outputs.

pub mod cli;
pub mod config;
pub mod eval;
pub mod experiments;

pub use config::{BehaviorKind, ExperimentConfig, SEED_ENV_VAR};
pub use eval::{evaluate_policy, evaluate_with, PolicyEval};
pub use experiments::{
    median, median_curve, meta_lambdas, read_metrics, run_convergence_experiment, run_resilience_experiment,
    run_shots_ablation, run_tasks_ablation, write_metrics, Algorithm, Curve, DataBank, MetricsRecord,
    TrajectoryStep, METRICS_COLUMNS,
};
