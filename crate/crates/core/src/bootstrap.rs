//! Parametric bootstrap of the decomposition shares.
//!
//! Replicate `b` draws `y* = 1μ̂ + Xβ̂ + Σ_i Z_i u_i* + ε*` from a ChaCha8 stream
//! keyed by `(seed, b)`, so any execution order produces the same draws.
//! Intervals are equal-tail percentile intervals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::{
    attribution_table, compute_moments, decompose, AttributionKind, AttributionTable, Decomposition,
};
use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::inference::{fit, FitResult, InferenceConfig};
use crate::linalg;
use crate::reml::RemlConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Coverage of the percentile intervals.
    pub level: f64,
    /// Abort when more than this fraction of replicates fails.
    pub max_failure_fraction: f64,
    pub reml: RemlConfig,
    pub inference: InferenceConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            seed: 1,
            level: 0.95,
            max_failure_fraction: 0.2,
            reml: RemlConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidArgument(
                "bootstrap needs at least 2 replicates".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Percentile interval of one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub label: String,
    /// Value at the original fit.
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub n_replicates: usize,
    pub n_failed: usize,
    pub level: f64,
    pub seed: u64,
    /// One interval per entry of [`share_statistics`], same order.
    pub per_row: Vec<Interval>,
    /// Statistics of every successful replicate, in replicate order.
    pub samples: Vec<Vec<f64>>,
}

impl BootstrapResult {
    pub fn get(&self, label: &str) -> Option<&Interval> {
        self.per_row.iter().find(|i| i.label == label)
    }
}

/// Labelled statistics that are bootstrapped: the share of every attribution
/// row (`kind:label`), the aggregate shares and the four R² measures.
pub fn share_statistics(d: &Decomposition, table: &AttributionTable) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = table
        .rows
        .iter()
        .filter(|r| r.kind != AttributionKind::Residual)
        .map(|r| (format!("{}:{}", r.kind.as_str(), r.label), table.share(r)))
        .collect();
    let y2 = d.sigma_y2;
    out.push(("total:S_X".into(), d.s_x2 / y2));
    out.push(("total:S_Z_population".into(), d.s_z2_pop / y2));
    out.push(("total:S_Z_data".into(), d.s_z2_data / y2));
    out.push(("total:S_XxZ".into(), d.s_xz2 / y2));
    out.push(("total:data_and_cross".into(), (d.s_z2_data + d.s_xz2) / y2));
    out.push(("total:residual".into(), d.sigma_eps2 / y2));
    out.push(("r2".into(), d.r2));
    out.push(("r2_pop".into(), d.r2_pop));
    out.push(("r2_marginal_naka".into(), d.r2_marginal_naka));
    out.push(("r2_conditional_naka".into(), d.r2_conditional_naka));
    out
}

/// Simulated response of replicate `index`.
pub fn simulate_response(
    frame: &ModelFrame,
    fit: &FitResult,
    seed: u64,
    index: u64,
) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut u = DVector::zeros(frame.p());
    for (i, block) in frame.blocks().iter().enumerate() {
        let sd = linalg::sqrt(fit.vc.sigma_u2[i]);
        for c in block.range.clone() {
            u[c] = sd * normal();
        }
    }
    let sd_e = linalg::sqrt(fit.vc.sigma_eps2);
    let eps = DVector::from_fn(frame.n(), |_, _| sd_e * normal());
    let mut y = frame.x() * &fit.beta_hat + frame.z() * u + eps;
    y.add_scalar_mut(fit.mu_hat);
    y
}

/// Statistics of one replicate; `None` when the refit fails or does not converge.
pub fn run_replicate(
    frame: &ModelFrame,
    fit_result: &FitResult,
    config: &BootstrapConfig,
    index: u64,
) -> Option<Vec<f64>> {
    let y = simulate_response(frame, fit_result, config.seed, index);
    let star = frame.with_response(y).ok()?;
    let refit = fit(&star, &config.reml, &config.inference).ok()?;
    if !refit.converged() {
        return None;
    }
    let moments = compute_moments(&star);
    let d = decompose(&refit, &moments);
    let table = attribution_table(&refit, &moments);
    let stats: Vec<f64> = share_statistics(&d, &table)
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    stats.iter().all(|v| v.is_finite()).then_some(stats)
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m - 1) as f64 * q;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(m - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile intervals from replicate outcomes indexed by replicate number.
pub fn summarize(
    frame: &ModelFrame,
    fit_result: &FitResult,
    config: &BootstrapConfig,
    outcomes: Vec<Option<Vec<f64>>>,
) -> Result<BootstrapResult> {
    let moments = compute_moments(frame);
    let d = decompose(fit_result, &moments);
    let table = attribution_table(fit_result, &moments);
    let points = share_statistics(&d, &table);

    let total = outcomes.len();
    let samples: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let failed = total - samples.len();
    if failed as f64 > config.max_failure_fraction * total as f64 || samples.len() < 2 {
        return Err(Error::BootstrapFailures {
            failed,
            total,
            limit: config.max_failure_fraction,
        });
    }
    let alpha = (1.0 - config.level) / 2.0;
    let mut column = Vec::with_capacity(samples.len());
    let per_row = points
        .into_iter()
        .enumerate()
        .map(|(j, (label, point))| {
            column.clear();
            column.extend(samples.iter().map(|s| s[j]));
            column.sort_by(f64::total_cmp);
            Interval {
                label,
                point,
                lower: quantile_sorted(&column, alpha),
                upper: quantile_sorted(&column, 1.0 - alpha),
            }
        })
        .collect();
    Ok(BootstrapResult {
        n_replicates: total,
        n_failed: failed,
        level: config.level,
        seed: config.seed,
        per_row,
        samples,
    })
}

/// Serial parametric bootstrap.
pub fn parametric_bootstrap(
    frame: &ModelFrame,
    fit_result: &FitResult,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    config.validate()?;
    let outcomes = (0..config.replicates as u64)
        .map(|b| run_replicate(frame, fit_result, config, b))
        .collect();
    summarize(frame, fit_result, config, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.1) - 1.4).abs() < 1e-15);
        assert!((quantile_sorted(&[2.0, 4.0], 0.25) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = BootstrapConfig {
            replicates: 1,
            ..BootstrapConfig::default()
        };
        assert!(c.validate().is_err());
        c.replicates = 10;
        c.level = 1.0;
        assert!(c.validate().is_err());
        c.level = 0.9;
        assert!(c.validate().is_ok());
    }
}
