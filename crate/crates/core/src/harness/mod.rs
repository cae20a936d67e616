//! Experiment orchestration: configuration, the imputer grid, missing-rate
//! sweeps, and deterministic report emission.

pub mod config;
pub mod grid;
pub mod pipeline;
pub mod report;

pub use config::{ConfigError, FactorImputerKind, HarnessConfig, ImageImputerKind, SweepAxis};
pub use grid::{run_grid, run_sweep, sort_rows, CellFailure, GridOutput};
pub use pipeline::{
    complete_factors, complete_images, prepare_replicate, run_single_cell, PipelineError,
};
pub use report::{emit_report, metrics_csv_string, parse_metrics_csv, write_metrics_csv, ReportError};
