//! Experiment runner for the continual panoptic segmentation lab.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, Variant};
pub use experiment::{
    load_run, run_ablation_suite, run_experiment, run_reduced_supervision_sweep, RunRecord,
};
