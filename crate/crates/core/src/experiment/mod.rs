//! Convergence experiments, configuration and result persistence.

mod cache;
mod chatter;
mod config;
mod records;
mod runs;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::control::ControlError;
use crate::measure::MeasureError;
use crate::model::ModelError;
use crate::objective::ObjectiveError;
use crate::optimize::OptimizeError;
use crate::sim::SimError;

pub use cache::{content_hash, Cache};
pub use chatter::{
    configured_relaxed_control, run_chattering_study, ChatterRow, ChatterStudy, StrictOptimum,
};
pub use config::{
    ChatterSection, ExperimentConfig, ModelSection, OptimizeSection, OutputSection, PolicyKind,
    PolicySection, ScheduleSection, SimSection, ValidateSection,
};
pub use records::{write_records_csv, CellRecord, RecordStore};
pub use runs::{
    gaussian_quantile_atoms, loglog_slope, median, run_converse_limit, run_forward_limit,
    ConvergenceRun, ReferenceInfo, RunKind, ScheduleSummary,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

/// Writes `value` as pretty JSON to `path`.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    std::fs::write(path, text + "\n").map_err(cache::io_err(path))
}
