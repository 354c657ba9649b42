//! Experiment harness behind the `mechsearch` binary: bench configuration
//! and execution, scene-corpus generation, affinity building/evaluation,
//! and open-world heatmap evaluation.

pub mod commands;
pub mod experiment;

pub use experiment::{
    mean_stderr, run_bench, BenchOutcome, CellResult, ExperimentConfig, ExperimentError,
    MethodSpec, MetricsRow,
};
