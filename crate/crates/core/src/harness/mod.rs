//! Seeded Monte-Carlo experiments on the simulated market and their CSV,
//! summary, manifest and SVG outputs.
//!
//! Every replication draws its own environment seed from the master seed
//! and `(experiment, n, replication)`, so results do not depend on thread
//! scheduling. Rows are sorted before writing.

pub mod config;
pub mod experiments;
pub mod output;
pub mod plot;
pub mod tasks;

pub use config::{ExperimentConfig, ExperimentKind, MomentSource, Scale, TrainingKernel};
pub use experiments::{
    action_label, extrapolation_grid, oracle_moments, run_experiment, run_extrapolation,
    run_kernel_scatter, run_policy_gap, run_policy_study, run_estimator_bias, run_rmse_vs_n,
    ExperimentResult, PolicyStudy, ResultRow, DM_ORACLE, METHOD_DSL, METHOD_NN, METHOD_PTO,
};
pub use output::{emit_outputs, summarize, SummaryRow};
pub use tasks::{
    evaluate_policy, fit_method, kernel_dump, moments_for, EvaluationRow, FitOutput,
    KernelSettings, Method, OptimizeConfig, TrainingLog,
};
