//! Configuration, file formats, experiment orchestration and reports.

pub mod config;
pub mod evaluate;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod reports;

pub use config::{ControllerKind, ExperimentConfig};
pub use evaluate::{evaluate, evaluation_seeds, Artifacts, FilterArtifacts};
pub use io::Layout;
pub use metrics::{ControllerSummary, EpisodeMetrics, ExperimentReport, MetricRow, Outcome};
pub use reports::{coverage_report, coverage_svg, shift_diagnostic, CoverageReport, CoverageRow, ShiftReport};
