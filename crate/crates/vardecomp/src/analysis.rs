//! End-to-end pipeline: formula, frame, fit, decomposition, bootstrap.

use vardecomp_core::{
    attribution_table, build_model_frame, compute_moments_with_cap, decompose, fit,
    parse_formula, AttributionTable, BootstrapConfig, BootstrapResult, Dataset, Decomposition,
    EmpiricalMoments, FitResult, InferenceConfig, ModelFrame, ParsedFormula, RemlConfig,
};

use crate::parallel::{parallel_bootstrap, ParallelError};

/// Bootstrap settings of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    /// Worker threads; `0` uses every available core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalysisOptions {
    /// Divide the response by its sample standard deviation before fitting.
    pub scale_y: bool,
    pub reml: RemlConfig,
    pub inference: InferenceConfig,
    pub bootstrap: Option<BootstrapSettings>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("formula: {0}")]
    Formula(vardecomp_core::Error),
    #[error("model: {0}")]
    Model(vardecomp_core::Error),
    #[error("fit: {0}")]
    Fit(vardecomp_core::Error),
    #[error("bootstrap: {0}")]
    Bootstrap(ParallelError),
}

/// Everything computed for one dataset and formula.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub formula_text: String,
    pub formula: ParsedFormula,
    pub frame: ModelFrame,
    /// Factor the response was divided by (1 unless `scale_y`).
    pub y_scale: f64,
    pub fit: FitResult,
    pub moments: EmpiricalMoments,
    pub decomposition: Decomposition,
    pub table: AttributionTable,
    pub bootstrap: Option<BootstrapResult>,
    /// Bootstrap worker count actually requested.
    pub workers: Option<usize>,
    pub warnings: Vec<String>,
}

impl Analysis {
    pub fn converged(&self) -> bool {
        self.fit.converged()
    }
}

pub fn analyze(
    data: &Dataset,
    formula_text: &str,
    options: &AnalysisOptions,
) -> Result<Analysis, AnalysisError> {
    let formula = parse_formula(formula_text).map_err(AnalysisError::Formula)?;
    let mut warnings: Vec<String> = formula.warnings.iter().map(|w| w.to_string()).collect();
    let mut frame = build_model_frame(data, &formula.ast).map_err(AnalysisError::Model)?;

    let mut y_scale = 1.0;
    if options.scale_y {
        let var = frame.sample_variance_y();
        if !(var > 0.0) {
            return Err(AnalysisError::Model(vardecomp_core::Error::DegenerateFrame(
                "response has zero sample variance and cannot be scaled".into(),
            )));
        }
        y_scale = var.sqrt();
        let y = frame.y() / y_scale;
        frame = frame.with_response(y).map_err(AnalysisError::Model)?;
    }

    let fit_result = fit(&frame, &options.reml, &options.inference).map_err(AnalysisError::Fit)?;
    let moments = compute_moments_with_cap(&frame, options.inference.dense_cov_cap);
    let decomposition = decompose(&fit_result, &moments);
    let table = attribution_table(&fit_result, &moments);

    let mut bootstrap = None;
    let mut workers = None;
    if let Some(settings) = options.bootstrap.as_ref().filter(|s| s.replicates > 0) {
        if !fit_result.converged() {
            warnings.push("bootstrap skipped: the REML fit did not converge".into());
        } else {
            let config = BootstrapConfig {
                replicates: settings.replicates,
                seed: settings.seed,
                level: settings.level,
                reml: options.reml.clone(),
                inference: options.inference.clone(),
                ..BootstrapConfig::default()
            };
            let result = parallel_bootstrap(&frame, &fit_result, &config, settings.workers)
                .map_err(AnalysisError::Bootstrap)?;
            if result.n_failed > 0 {
                warnings.push(format!(
                    "{} of {} bootstrap replicates failed and were dropped",
                    result.n_failed, result.n_replicates
                ));
            }
            bootstrap = Some(result);
            workers = Some(settings.workers);
        }
    }
    if !fit_result.converged() {
        warnings.push("REML did not converge; estimates are the best iterate".into());
    }

    Ok(Analysis {
        formula_text: formula_text.to_string(),
        formula,
        frame,
        y_scale,
        fit: fit_result,
        moments,
        decomposition,
        table,
        bootstrap,
        workers,
        warnings,
    })
}
