//! Multi-threaded parametric bootstrap.

use rayon::prelude::*;
use vardecomp_core::bootstrap::{run_replicate, summarize};
use vardecomp_core::{BootstrapConfig, BootstrapResult, FitResult, ModelFrame};

#[derive(Debug, thiserror::Error)]
pub enum ParallelError {
    #[error(transparent)]
    Core(#[from] vardecomp_core::Error),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// Bootstrap on `workers` threads (`0` uses every available core).
///
/// Replicate `b` always draws from stream `(seed, b)` and lands in slot `b`,
/// so the result does not depend on the worker count.
pub fn parallel_bootstrap(
    frame: &ModelFrame,
    fit: &FitResult,
    config: &BootstrapConfig,
    workers: usize,
) -> Result<BootstrapResult, ParallelError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ParallelError::Pool(e.to_string()))?;
    let outcomes: Vec<Option<Vec<f64>>> = pool.install(|| {
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|b| run_replicate(frame, fit, config, b))
            .collect()
    });
    Ok(summarize(frame, fit, config, outcomes)?)
}
