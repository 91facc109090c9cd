//! Replicated experiments: coverage calibration, error distributions and
//! whitening diagnostics, with deterministic per-trial seeding.

mod config;
mod report;
pub mod stats;
mod trial;

pub use config::{ConfigError, ExperimentConfig, GridSpec, QueryPoint, PRESETS};
pub use report::{
    coverage_experiment, diagnose, error_distribution_experiment, plot_data, CoverageCell, CoverageReport,
    DiagnoseReport, DiagnoseRow, DiagnosticsSummary, ErrorColumn, ErrorReport, FailureSummary, Metadata, PlotSeries,
    FORMAT_VERSION, MAX_FAILURE_FRACTION,
};
pub use trial::{run_trial, Experiment, Interval, Method, MethodOutcome, TrialArtifacts, TrialDiagnostics, TrialRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Demand(#[from] crate::demand::DemandError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error("{failed} of {total} trials failed for the {method} method (limit {limit:.0}%)", limit = MAX_FAILURE_FRACTION * 100.0)]
    TooManyFailures { method: &'static str, failed: usize, total: usize },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("malformed error table: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
