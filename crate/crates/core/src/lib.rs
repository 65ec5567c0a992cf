//! Analysis engine for repeated-measures online experiments.
//!
//! Estimates average treatment effects and their variances for t-test,
//! CUPED, parallel, cumulative, crossover, and re-randomized designs by
//! fitting parameterized mean models to asymptotically normal metric
//! summaries. Handles arbitrary missingness through presence-indicator
//! augmentation and ratio metrics through the delta method, and ships a
//! simulation laboratory that validates the estimator against ground
//! truth and bootstrap.
//!
//! Pipeline: [`dataset::parse_dataset`] → [`moments::MomentSummary`] →
//! [`inference::fit`] on a [`designs::DesignModel`].

pub mod dataset;
pub mod designs;
pub mod inference;
pub mod moments;
pub mod power;
pub mod simlab;
pub mod stats;

pub use dataset::{
    parse_dataset, DataError, DatasetBuilder, ExperimentDataset, MetricDef, MetricKind,
    ParseOptions, PeriodObservation, ValidationReport,
};
pub use designs::{build_model, DesignError, DesignKind, DesignModel, EffectScale};
pub use inference::{
    closed_form_variance, fit, reduce_model, wald_test, FitError, FitOptions, FitResult,
    TestResult,
};
pub use moments::{delta_method, GroupMoments, MetricMoments, MomentError, MomentSummary};
pub use power::{
    compare_designs, required_sample_size, DesignComparison, DesignVariance, PowerError,
    PowerResult, PowerSpec,
};
pub use simlab::{
    bootstrap, generate, run_monte_carlo, BootstrapReport, MissingnessRule, MonteCarloReport,
    MonteCarloRun, MonteCarloSpec, SimConfig, SimError,
};
