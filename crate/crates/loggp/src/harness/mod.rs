//! Experiment orchestration: configuration, closed-loop trials, cohort
//! studies, latency benchmarks, and file export.

pub mod bench;
pub mod config;
pub mod export;
pub mod study;
pub mod trial;

pub use bench::{run_bench, BenchReport};
pub use config::{ExperimentConfig, GainTable, GpPersistence, GpSettings, PlantConfig};
pub use study::{run_study, StudyOutput, StudyReport};
pub use trial::{run_trial, RunLog, SummaryMetrics, TrialResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] crate::plant::PlantError),
    #[error(transparent)]
    Tree(#[from] crate::tree::TreeError),
    #[error(transparent)]
    Gp(#[from] crate::gp::GpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
