//! Restricted maximum likelihood for `(σ²_ε, σ²_{u_1}, …, σ²_{u_r})`.
//!
//! The estimates solve the REML stationarity equations
//!
//! ```text
//! σ²_ε = yᵀ P y / (n − k − 1)
//! σ²_ε tr(P Z_i Z_iᵀ) = yᵀ P Z_i Z_iᵀ P y          (i = 1..r)
//! ```
//!
//! with `P = H⁻¹ − H⁻¹X̃(X̃ᵀH⁻¹X̃)⁻¹X̃ᵀH⁻¹` and `H` built from `γ_i = σ²_{u_i}/σ²_ε`.
//! `σ²_ε` is profiled out. Each sweep first tries an average-information
//! Newton step; if that lowers the restricted likelihood it falls back to the
//! multiplicative fixed point `γ_i ← γ_i · ‖Z_iᵀPy‖² / (σ²_ε tr(Z_iᵀPZ_i))`,
//! halved in log space until the likelihood does not drop.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::kernels::KernelState;
use crate::linalg::{self, SymFactor};

/// Residual variance and one variance per random block.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub sigma_eps2: f64,
    pub sigma_u2: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(sigma_eps2: f64, sigma_u2: Vec<f64>) -> Result<Self> {
        let vc = VarianceComponents {
            sigma_eps2,
            sigma_u2,
        };
        vc.validate()?;
        Ok(vc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps2 > 0.0 && self.sigma_eps2.is_finite()) {
            return Err(Error::InvalidArgument(
                "residual variance must be positive and finite".into(),
            ));
        }
        if self.sigma_u2.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument(
                "random-effect variances must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `γ_i = σ²_{u_i} / σ²_ε`.
    pub fn gamma(&self) -> Vec<f64> {
        self.sigma_u2.iter().map(|s| s / self.sigma_eps2).collect()
    }

    /// Every component multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        VarianceComponents {
            sigma_eps2: self.sigma_eps2 * c,
            sigma_u2: self.sigma_u2.iter().map(|s| s * c).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlConfig {
    /// Bound on `max_i |γ_i^{new}/γ_i − 1|`.
    pub tol: f64,
    /// Bound on the absolute equation residuals at unit sample variance of `y`.
    pub residual_tol: f64,
    pub max_iter: usize,
    /// A component whose share `σ²_{u_i} tr(Σ̂_{Z_i}) / σ̂²_y` falls below this is clamped to 0.
    pub boundary_share: f64,
    /// Sweeps during which a clamped component may re-enter.
    pub reentry_sweeps: usize,
    /// Starting values; `None` uses `σ²_ε = σ̂²_y/2`, `σ²_{u_i} = σ̂²_y/(2r)`.
    pub init: Option<VarianceComponents>,
}

impl Default for RemlConfig {
    fn default() -> Self {
        RemlConfig {
            tol: 1e-8,
            residual_tol: 1e-6,
            max_iter: 500,
            boundary_share: 1e-9,
            reentry_sweeps: 3,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlReport {
    pub estimates: VarianceComponents,
    pub iterations: usize,
    pub converged: bool,
    /// `r + 1` absolute residuals at unit sample variance of `y`: the
    /// residual-variance equation first, then one per block. Entries of
    /// boundary components are reported but not required to be small.
    pub residual_reml_eqs: Vec<f64>,
    /// Restricted log-likelihood at the estimates on the original scale of `y`,
    /// without the `−(n−k−1)/2 · log 2π` constant.
    pub restricted_loglik: f64,
    /// Components pinned at 0.
    pub boundary_flags: Vec<bool>,
    /// Profiled restricted log-likelihood (unit-variance scale) after every
    /// accepted iteration. Non-decreasing up to evaluation noise: the final
    /// Newton refinement may move it by rounding error only.
    pub loglik_trace: Vec<f64>,
    /// Largest `|ratio − 1|` over interior components at the returned point.
    pub max_relative_step: f64,
    /// Accepted sweeps that used the average-information step.
    pub newton_steps: usize,
}

/// Quantities at one value of `γ` with `σ²_ε` profiled out.
struct Eval {
    state: KernelState,
    h_inv_xt: DMatrix<f64>,
    m_factor: SymFactor,
    py: DVector<f64>,
    sigma2: f64,
    loglik: f64,
}

impl Eval {
    fn new(frame: &ModelFrame, xt: &DMatrix<f64>, gamma: &[f64]) -> Result<Self> {
        let state = KernelState::new(frame, gamma)?;
        let df = (frame.n() - frame.k() - 1) as f64;
        let h_inv_xt = state.h_inv_apply(xt);
        let m_factor = SymFactor::new(xt.tr_mul(&h_inv_xt), "X~'H^-1 X~")?;
        let y = frame.y();
        let hy = state.h_inv_apply_vec(y);
        let py = &hy - &h_inv_xt * m_factor.solve_vec(&h_inv_xt.tr_mul(y));
        let ypy = y.dot(&py);
        let sigma2 = ypy / df;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::DegenerateFrame(
                "no residual variation left after the fixed effects".into(),
            ));
        }
        let loglik = -0.5 * (df * linalg::ln(sigma2) + state.ln_det_h() + m_factor.ln_det() + df);
        if !loglik.is_finite() {
            return Err(Error::NonFinite("restricted log-likelihood"));
        }
        Ok(Eval {
            state,
            h_inv_xt,
            m_factor,
            py,
            sigma2,
            loglik,
        })
    }

    /// Per block: `tr(Z_iᵀ P Z_i)` and `‖Z_iᵀ P y‖²`.
    fn scores(&self, frame: &ModelFrame) -> (Vec<f64>, Vec<f64>) {
        let z = frame.z();
        let hz = self.state.h_inv_z();
        let f = self.h_inv_xt.tr_mul(z);
        let s = self.m_factor.solve(&f);
        let zpy = z.tr_mul(&self.py);
        let mut traces = vec![0.0; frame.r()];
        let mut norms = vec![0.0; frame.r()];
        for (i, block) in frame.blocks().iter().enumerate() {
            for c in block.range.clone() {
                let direct = z.column(c).dot(&hz.column(c));
                let correction = f.column(c).dot(&s.column(c));
                traces[i] += direct - correction;
                norms[i] += zpy[c] * zpy[c];
            }
        }
        (traces, norms)
    }

    /// `P m` for an `n × q` matrix.
    fn p_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let hm = self.state.h_inv_apply(m);
        let coef = self.m_factor.solve(&self.h_inv_xt.tr_mul(m));
        hm - &self.h_inv_xt * coef
    }

    /// Average-information Newton direction in `(σ²_ε, σ²_{u_i})` over the
    /// blocks flagged `free`: their indices and the step, residual variance
    /// first. `None` if the information matrix is singular.
    fn ai_step(
        &self,
        frame: &ModelFrame,
        gamma: &[f64],
        free: &[bool],
        traces: &[f64],
        norms: &[f64],
    ) -> Option<(Vec<usize>, DVector<f64>)> {
        let idx: Vec<usize> = (0..gamma.len()).filter(|&i| free[i]).collect();
        let q = idx.len() + 1;
        let s2 = self.sigma2;
        let n = frame.n();
        let mut w = DMatrix::zeros(n, q);
        w.column_mut(0).copy_from(&(&self.py / s2));
        for (j, &i) in idx.iter().enumerate() {
            let zi = frame.z_block(i);
            let v = zi * zi.tr_mul(&self.py) / s2;
            w.column_mut(j + 1).copy_from(&v);
        }
        let pw = self.p_apply(&w);
        let mut ai = w.tr_mul(&pw) * (0.5 / s2);
        linalg::symmetrize(&mut ai);

        let gram = self.h_inv_xt.tr_mul(&self.h_inv_xt);
        let tr_p = self.state.trace_h_inv()
            - linalg::trace_of_product(&self.m_factor.inverse(), &gram);
        let mut score = DVector::zeros(q);
        score[0] = -0.5 * (tr_p / s2 - self.py.norm_squared() / (s2 * s2));
        for (j, &i) in idx.iter().enumerate() {
            score[j + 1] = -0.5 * (traces[i] / s2 - norms[i] / (s2 * s2));
        }
        let delta = SymFactor::new(ai, "average information").ok()?.solve_vec(&score);
        if delta.iter().any(|d| !d.is_finite()) {
            return None;
        }
        Some((idx, delta))
    }
}

/// Ratios after moving `(σ²_ε, σ²_{u_i})` by `t · delta`; `None` when the
/// residual variance would not stay positive.
fn ai_candidate(gamma: &[f64], sigma2: f64, idx: &[usize], delta: &DVector<f64>, t: f64) -> Option<Vec<f64>> {
    let new_eps = sigma2 + t * delta[0];
    if !(new_eps > 0.0) {
        return None;
    }
    let mut out = gamma.to_vec();
    for (j, &i) in idx.iter().enumerate() {
        let su = sigma2 * gamma[i] + t * delta[j + 1];
        out[i] = if su > 0.0 { su / new_eps } else { 0.1 * gamma[i] };
    }
    out.iter().all(|g| g.is_finite()).then_some(out)
}

/// `−½[(n−k−1) log σ²_ε + log det H + log det(X̃ᵀH⁻¹X̃) + yᵀPy/σ²_ε]`.
pub fn restricted_loglik(frame: &ModelFrame, vc: &VarianceComponents) -> Result<f64> {
    vc.validate()?;
    let xt = frame.x_tilde();
    let eval = Eval::new(frame, &xt, &vc.gamma())?;
    let df = (frame.n() - frame.k() - 1) as f64;
    let value = -0.5
        * (df * linalg::ln(vc.sigma_eps2)
            + eval.state.ln_det_h()
            + eval.m_factor.ln_det()
            + df * eval.sigma2 / vc.sigma_eps2);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("restricted log-likelihood"))
    }
}

/// Absolute residuals of the REML equations at `vc`, evaluated after scaling `y`
/// (and `vc`) to unit sample variance. Entry 0 is the residual-variance equation.
pub fn reml_equation_residuals(frame: &ModelFrame, vc: &VarianceComponents) -> Result<Vec<f64>> {
    vc.validate()?;
    let var_y = frame.sample_variance_y();
    if !(var_y > 0.0) {
        return Err(Error::DegenerateFrame("response has zero variance".into()));
    }
    let (scaled, _) = unit_frame(frame)?;
    let vc = vc.scaled(1.0 / var_y);
    let xt = frame.x_tilde();
    let eval = Eval::new(&scaled, &xt, &vc.gamma())?;
    let (traces, norms) = eval.scores(&scaled);
    let mut out = Vec::with_capacity(frame.r() + 1);
    out.push((vc.sigma_eps2 - eval.sigma2).abs());
    for i in 0..frame.r() {
        out.push((vc.sigma_eps2 * traces[i] - norms[i]).abs());
    }
    Ok(out)
}

fn unit_frame(frame: &ModelFrame) -> Result<(ModelFrame, f64)> {
    let var_y = frame.sample_variance_y();
    if !(var_y > 0.0 && var_y.is_finite()) {
        return Err(Error::DegenerateFrame(
            "response has zero sample variance; nothing to decompose".into(),
        ));
    }
    let sd = linalg::sqrt(var_y);
    let y = linalg::center_vec(frame.y()) / sd;
    Ok((frame.with_response(y)?, var_y))
}

/// Fit the variance components by REML.
pub fn fit_reml(frame: &ModelFrame, config: &RemlConfig) -> Result<RemlReport> {
    let n = frame.n();
    let k = frame.k();
    if n <= k + 1 {
        return Err(Error::DegenerateFrame(alloc::format!(
            "n = {n} must exceed k + 1 = {}",
            k + 1
        )));
    }
    let (scaled, var_y) = unit_frame(frame)?;
    let xt = frame.x_tilde();
    let r = frame.r();

    // Share of unit variance carried by γ_i at σ²_ε = 1.
    let tr_sigma_z: Vec<f64> = (0..r)
        .map(|i| {
            let zi = scaled.z_block(i).into_owned();
            linalg::center_columns(&zi).norm_squared() / (n as f64 - 1.0)
        })
        .collect();

    let mut gamma: Vec<f64> = match &config.init {
        Some(init) => {
            init.validate()?;
            if init.sigma_u2.len() != r {
                return Err(Error::InvalidArgument(
                    "initial values need one variance per random block".into(),
                ));
            }
            init.gamma()
        }
        None => vec![1.0 / r.max(1) as f64; r],
    };

    let mut boundary = vec![false; r];
    let mut reentry_left = vec![config.reentry_sweeps; r];
    let mut eval = Eval::new(&scaled, &xt, &gamma)?;
    let mut trace = vec![eval.loglik];
    let mut iterations = 0;
    let mut newton_steps = 0;
    let mut converged = false;
    let mut max_step;
    let mut residuals = vec![0.0; r];

    loop {
        let (traces, norms) = eval.scores(&scaled);
        let sigma2 = eval.sigma2;
        let ratio: Vec<f64> = (0..r)
            .map(|i| {
                if traces[i] > 0.0 {
                    norms[i] / (sigma2 * traces[i])
                } else {
                    0.0
                }
            })
            .collect();
        for i in 0..r {
            residuals[i] = (sigma2 * traces[i] - norms[i]).abs();
        }

        max_step = 0.0;
        let mut max_res = 0.0_f64;
        let mut pending_reentry = false;
        for i in 0..r {
            if gamma[i] > 0.0 {
                max_step = f64::max(max_step, (ratio[i] - 1.0).abs());
                max_res = max_res.max(residuals[i]);
            } else if reentry_left[i] > 0 && ratio[i] > 1.0 + config.tol {
                pending_reentry = true;
            }
        }
        if max_step <= config.tol && max_res <= config.residual_tol && !pending_reentry {
            converged = true;
            // Newton refinement. Near the optimum the likelihood is flat to
            // within its evaluation noise, so steps are accepted while they
            // are tiny and contracting rather than by a likelihood test.
            let (mut traces, mut norms) = (traces, norms);
            let mut prev_size = f64::INFINITY;
            for _ in 0..3 {
                let free: Vec<bool> = gamma.iter().map(|g| *g > 0.0).collect();
                let Some((idx, delta)) = eval.ai_step(&scaled, &gamma, &free, &traces, &norms)
                else {
                    break;
                };
                let mut size = (delta[0] / eval.sigma2).abs();
                for (j, &i) in idx.iter().enumerate() {
                    size = size.max((delta[j + 1] / (eval.sigma2 * gamma[i])).abs());
                }
                if !(size <= 1e-6 && size < prev_size) {
                    break;
                }
                let Some(candidate) = ai_candidate(&gamma, eval.sigma2, &idx, &delta, 1.0) else {
                    break;
                };
                if candidate.iter().zip(&gamma).any(|(c, g)| *g > 0.0 && *c <= 0.0) {
                    break;
                }
                let Ok(next) = Eval::new(&scaled, &xt, &candidate) else {
                    break;
                };
                let (t2, n2) = next.scores(&scaled);
                let res2: Vec<f64> = (0..r)
                    .map(|i| (next.sigma2 * t2[i] - n2[i]).abs())
                    .collect();
                if (0..r).any(|i| candidate[i] > 0.0 && res2[i] > config.residual_tol) {
                    break;
                }
                prev_size = size;
                gamma = candidate;
                eval = next;
                residuals = res2;
                traces = t2;
                norms = n2;
                trace.push(eval.loglik);
                newton_steps += 1;
            }
            break;
        }
        if iterations >= config.max_iter {
            break;
        }
        iterations += 1;

        for i in 0..r {
            if gamma[i] == 0.0 && reentry_left[i] > 0 {
                reentry_left[i] -= 1;
            }
        }

        let propose = |w: f64| -> Vec<f64> {
            (0..r)
                .map(|i| {
                    if gamma[i] > 0.0 {
                        let g = gamma[i] * libm::pow(ratio[i].max(1e-300), w);
                        if g * sigma2 * tr_sigma_z[i] < config.boundary_share {
                            0.0
                        } else {
                            g
                        }
                    } else if reentry_left[i] > 0 && ratio[i] > 1.0 + config.tol {
                        // Re-enter with a share just above the clamp threshold.
                        let floor = config.boundary_share / (sigma2 * tr_sigma_z[i]).max(1e-300);
                        (1e3 * floor).max(1e-6)
                    } else {
                        0.0
                    }
                })
                .collect()
        };

        let slack = 1e-13 * eval.loglik.abs().max(1.0);
        let clamp = |mut g: Vec<f64>| -> Vec<f64> {
            for i in 0..r {
                if g[i] * sigma2 * tr_sigma_z[i] < config.boundary_share {
                    g[i] = 0.0;
                }
            }
            g
        };
        let free: Vec<bool> = gamma.iter().map(|g| *g > 0.0).collect();
        let mut accepted = None;
        if free.iter().any(|f| *f) && !pending_reentry {
            if let Some((idx, delta)) = eval.ai_step(&scaled, &gamma, &free, &traces, &norms) {
                let mut t = 1.0;
                for _ in 0..8 {
                    if let Some(candidate) = ai_candidate(&gamma, sigma2, &idx, &delta, t) {
                        let candidate = clamp(candidate);
                        if let Ok(next) = Eval::new(&scaled, &xt, &candidate) {
                            if next.loglik >= eval.loglik - slack {
                                accepted = Some((candidate, next));
                                newton_steps += 1;
                                break;
                            }
                        }
                    }
                    t *= 0.5;
                }
            }
        }
        let mut w = 1.0;
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let candidate = propose(w);
            if let Ok(next) = Eval::new(&scaled, &xt, &candidate) {
                if next.loglik >= eval.loglik - slack {
                    accepted = Some((candidate, next));
                    break;
                }
            }
            w *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                gamma = candidate;
                eval = next;
                trace.push(eval.loglik);
            }
            None => break,
        }
    }

    for i in 0..r {
        boundary[i] = gamma[i] == 0.0;
    }
    let sigma_eps2 = eval.sigma2 * var_y;
    let estimates = VarianceComponents {
        sigma_eps2,
        sigma_u2: gamma.iter().map(|g| g * sigma_eps2).collect(),
    };
    let mut residual_reml_eqs = vec![0.0];
    residual_reml_eqs.extend_from_slice(&residuals);
    let restricted_loglik = restricted_loglik(frame, &estimates)?;
    Ok(RemlReport {
        estimates,
        iterations,
        converged,
        residual_reml_eqs,
        restricted_loglik,
        boundary_flags: boundary,
        loglik_trace: trace,
        max_relative_step: max_step,
        newton_steps,
    })
}
