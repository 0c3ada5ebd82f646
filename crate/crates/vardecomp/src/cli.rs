//! Command-line front end.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use vardecomp_core::{parse_formula, RemlConfig};

use crate::analysis::{analyze, AnalysisOptions, BootstrapSettings};
use crate::data::{read_csv, ColumnType};
use crate::plot::render_svg;
use crate::report::Report;

/// Exit status of a run with a converged fit.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid input or configuration.
pub const EXIT_INPUT: i32 = 1;
/// Exit status when REML did not converge; the report is still written.
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
    Csv,
}

/// Fit a variance-components mixed model by REML and decompose the
/// variance of the response.
///
/// Every option can also be set through an environment variable with the
/// `VARDECOMP_` prefix, e.g. `VARDECOMP_BOOTSTRAP=1000`.
#[derive(Debug, Clone, Parser)]
#[command(name = "vardecomp", version)]
pub struct RunConfig {
    /// CSV file with a header row.
    #[arg(long, env = "VARDECOMP_DATA", value_name = "PATH")]
    pub data: PathBuf,

    /// Model formula, e.g. "Reaction ~ Days + (Days || Subject)".
    #[arg(long, env = "VARDECOMP_FORMULA")]
    pub formula: String,

    #[arg(long, value_enum, default_value = "text", env = "VARDECOMP_OUTPUT")]
    pub output: OutputFormat,

    /// Divide the response by its sample standard deviation before fitting.
    #[arg(long, env = "VARDECOMP_SCALE_Y")]
    pub scale_y: bool,

    /// Parametric bootstrap replicates (0 disables).
    #[arg(long, default_value_t = 0, value_name = "N", env = "VARDECOMP_BOOTSTRAP")]
    pub bootstrap: usize,

    #[arg(long, default_value_t = 1, env = "VARDECOMP_SEED")]
    pub seed: u64,

    /// Coverage of bootstrap intervals, in (0, 1).
    #[arg(long, default_value_t = 0.95, value_parser = parse_level, env = "VARDECOMP_LEVEL")]
    pub level: f64,

    /// Relative-change tolerance of the REML iteration.
    #[arg(long, default_value_t = 1e-8, value_parser = parse_positive, env = "VARDECOMP_TOL")]
    pub tol: f64,

    #[arg(long, default_value_t = 500, env = "VARDECOMP_MAX_ITER")]
    pub max_iter: usize,

    /// Bootstrap worker threads (0 uses all cores).
    #[arg(long, default_value_t = 0, env = "VARDECOMP_WORKERS")]
    pub workers: usize,

    /// Write an SVG bar chart of the shares to this path.
    #[arg(long, value_name = "PATH", env = "VARDECOMP_PLOT")]
    pub plot: Option<PathBuf>,
}

fn parse_level(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("level must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

/// Execute a run and write its report to `out`; returns the exit status.
pub fn execute(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut hints = HashMap::new();
    if let Ok(parsed) = parse_formula(&config.formula) {
        for term in &parsed.ast.random {
            hints.insert(term.group.clone(), ColumnType::Categorical);
        }
    }
    let data = match read_csv(&config.data, &hints) {
        Ok(d) => d,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", config.data.display());
            return EXIT_INPUT;
        }
    };
    let options = AnalysisOptions {
        scale_y: config.scale_y,
        reml: RemlConfig {
            tol: config.tol,
            max_iter: config.max_iter,
            ..RemlConfig::default()
        },
        bootstrap: (config.bootstrap > 0).then_some(BootstrapSettings {
            replicates: config.bootstrap,
            seed: config.seed,
            level: config.level,
            workers: config.workers,
        }),
        ..AnalysisOptions::default()
    };
    let analysis = match analyze(&data, &config.formula, &options) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INPUT;
        }
    };
    for w in &analysis.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let report = Report::from_analysis(&analysis);
    let body = match config.output {
        OutputFormat::Text => report.render_text(),
        OutputFormat::Json => report.to_json() + "\n",
        OutputFormat::Csv => report.render_csv(),
    };
    if let Err(e) = out.write_all(body.as_bytes()) {
        let _ = writeln!(err, "error: cannot write report: {e}");
        return EXIT_INPUT;
    }
    if let Some(path) = &config.plot {
        if let Err(e) = std::fs::write(path, render_svg(&report)) {
            let _ = writeln!(err, "error: cannot write plot {}: {e}", path.display());
            return EXIT_INPUT;
        }
    }
    if analysis.converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

/// Parse `args` (program name first) and run. Usage errors exit with
/// [`EXIT_INPUT`]; `--help` and `--version` exit with [`EXIT_OK`].
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match RunConfig::try_parse_from(args) {
        Ok(config) => execute(&config, out, err),
        Err(e) => {
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_INPUT
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            }
        }
    }
}
