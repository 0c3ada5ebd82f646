//! Command-line workflow and file formats around [`vardecomp_core`]:
//! CSV ingestion, multi-threaded bootstrap, text/JSON/CSV reports, an SVG
//! share chart and a validator for serialized reports.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod parallel;
pub mod plot;
pub mod report;
pub mod validate;

pub use analysis::{analyze, Analysis, AnalysisError, AnalysisOptions, BootstrapSettings};
pub use cli::{run, OutputFormat, RunConfig};
pub use data::{parse_csv, read_csv, ColumnType, DataError};
pub use parallel::parallel_bootstrap;
pub use report::Report;
pub use validate::{validate_report, Check};
