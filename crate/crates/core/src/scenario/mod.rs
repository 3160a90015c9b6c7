//! Scenario files, the run loop, metrics, CSV telemetry and the shipped
//! golden scenarios.

mod config;
mod csv;
pub mod golden;
mod run;

pub use config::{BmsConfig, CellSpec, ChemistrySpec, ConditioningSpec, ScenarioConfig, ScheduledEvent, ValidationIssue};
pub use csv::{csv_header, csv_row, emit_csv, CsvWriter};
pub use run::{
    mean_variance, run_conditioning_sim, run_conditioning_with, run_scenario, run_scenario_with, MetricsAccumulator,
    RunMetrics, MAX_STEPS,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario:{}", list(.0))]
    Invalid(Vec<ValidationIssue>),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot build scenario: {0}")]
    Build(String),
}

fn list(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| format!("\n  {i}")).collect()
}
