//! Intercept, fixed effects and random-effect predictions at given variance
//! components, in the centred parameterization.
//!
//! With `K = C H_C⁻¹ C` and `B = XᵀKX`:
//!
//! ```text
//! β̂ = B⁻¹XᵀKy              Σ_β̂ = σ²_ε B⁻¹
//! ũ = G ZᵀK(y − Xβ̂)        Σ_ũ = σ²_ε G Zᵀ(K − KXB⁻¹XᵀK)Z G
//! μ̂ = b⁻¹ 1ᵀP_H y          Var(μ̂) = σ²_ε / b
//! ```

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::kernels::KernelState;
use crate::linalg::{self, SymFactor};
use crate::reml::{fit_reml, RemlConfig, RemlReport, VarianceComponents};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    /// Largest `p` for which `Σ_ũ` is stored as a dense `p × p` matrix.
    pub dense_cov_cap: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            dense_cov_cap: 2000,
        }
    }
}

/// Prediction covariance of `ũ`.
#[derive(Debug, Clone, PartialEq)]
pub enum UCovariance {
    /// Full `p × p` matrix, cross-block entries included.
    Dense(DMatrix<f64>),
    /// Large `p`: the diagonal of `Σ_ũ` and the diagonal of `Σ̂_Z Σ_ũ`, which
    /// is all the decomposition needs.
    Reduced {
        variances: DVector<f64>,
        sz_cov_diag: DVector<f64>,
    },
}

impl UCovariance {
    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            UCovariance::Dense(m) => m.diagonal(),
            UCovariance::Reduced { variances, .. } => variances.clone(),
        }
    }

    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        match self {
            UCovariance::Dense(m) => Some(m),
            UCovariance::Reduced { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub vc: VarianceComponents,
    pub mu_hat: f64,
    /// `Var(μ̂) = σ²_ε / b`.
    pub var_mu: f64,
    pub beta_hat: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    /// Concatenated `(ũ_1, …, ũ_r)`.
    pub u_tilde: DVector<f64>,
    pub cov_u: UCovariance,
    /// Present when the components came from [`fit`].
    pub reml_report: Option<RemlReport>,
    pub fixed_labels: Vec<String>,
    pub block_labels: Vec<String>,
    pub block_ranges: Vec<Range<usize>>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.reml_report.as_ref().map_or(true, |r| r.converged)
    }

    pub fn se_mu(&self) -> f64 {
        linalg::sqrt(self.var_mu)
    }

    pub fn se_beta(&self) -> DVector<f64> {
        self.cov_beta.diagonal().map(linalg::sqrt)
    }

    /// `ũ_i`.
    pub fn u_block(&self, i: usize) -> DVector<f64> {
        let r = &self.block_ranges[i];
        self.u_tilde.rows(r.start, r.len()).into_owned()
    }
}

/// BLUE and BLUP at `vc` with the default [`InferenceConfig`].
pub fn solve_blue_blup(frame: &ModelFrame, vc: &VarianceComponents) -> Result<FitResult> {
    solve_blue_blup_with(frame, vc, &InferenceConfig::default())
}

pub fn solve_blue_blup_with(
    frame: &ModelFrame,
    vc: &VarianceComponents,
    config: &InferenceConfig,
) -> Result<FitResult> {
    vc.validate()?;
    if vc.sigma_u2.len() != frame.r() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} variances for {} random blocks",
            vc.sigma_u2.len(),
            frame.r()
        )));
    }
    let (n, k, p) = (frame.n(), frame.k(), frame.p());
    let sigma2 = vc.sigma_eps2;
    let gamma = vc.gamma();
    let state = KernelState::new(frame, &gamma)?;
    let x = frame.x();
    let y = frame.y();
    let z = frame.z();

    let kx = state.chc_inv_c_apply(x);
    let ky = state.chc_inv_c_apply_vec(y);
    let (beta_hat, b_inv) = if k == 0 {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let mut b_mat = x.tr_mul(&kx);
        linalg::symmetrize(&mut b_mat);
        let factor = SymFactor::new(b_mat, "X'C H_C^-1 C X")?;
        let beta = factor.solve_vec(&x.tr_mul(&ky));
        let mut inv = factor.inverse();
        linalg::symmetrize(&mut inv);
        (beta, inv)
    };
    let cov_beta = &b_inv * sigma2;

    let g_cols = column_gamma(frame, &gamma);
    let k_resid = &ky - &kx * &beta_hat;
    let u_tilde = (z.tr_mul(&k_resid)).component_mul(&g_cols);

    // μ̂ through P_H, the projection without the intercept column.
    let h1 = state.h_inv_ones();
    let ph_1 = if k == 0 {
        h1.clone()
    } else {
        let hx = state.h_inv_apply(x);
        let factor = SymFactor::new(x.tr_mul(&hx), "X'H^-1 X")?;
        h1 - &hx * factor.solve_vec(&x.tr_mul(h1))
    };
    let b = ph_1.sum();
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Factorization("1'P_H 1 is not positive"));
    }
    let mu_hat = ph_1.dot(y) / b;
    let var_mu = sigma2 / b;

    let kz = state.chc_inv_c_apply(z);
    // P Z with P = K − KXB⁻¹XᵀK.
    let pz = if k == 0 {
        kz
    } else {
        let xkz = kx.tr_mul(z);
        &kz - &kx * (&b_inv * xkz)
    };
    let cov_u = if p <= config.dense_cov_cap {
        let mut m = z.tr_mul(&pz);
        for i in 0..p {
            for j in 0..p {
                m[(i, j)] *= sigma2 * g_cols[i] * g_cols[j];
            }
        }
        linalg::symmetrize(&mut m);
        UCovariance::Dense(m)
    } else {
        let variances = DVector::from_fn(p, |a, _| {
            sigma2 * g_cols[a] * g_cols[a] * z.column(a).dot(&pz.column(a))
        });
        let mut pzg = pz;
        for (a, mut col) in pzg.column_iter_mut().enumerate() {
            col *= g_cols[a];
        }
        let cz = linalg::center_columns(z);
        let mut czg = cz.clone();
        for (a, mut col) in czg.column_iter_mut().enumerate() {
            col *= g_cols[a];
        }
        // (CZ G ZᵀC)(P Z G), an n × p product through an n × n intermediate.
        let s = &czg * cz.transpose();
        let spzg = s * pzg;
        let scale = sigma2 / (n as f64 - 1.0);
        let sz_cov_diag = DVector::from_fn(p, |a, _| scale * cz.column(a).dot(&spzg.column(a)));
        UCovariance::Reduced {
            variances,
            sz_cov_diag,
        }
    };

    for v in beta_hat
        .iter()
        .chain(u_tilde.iter())
        .chain(core::iter::once(&mu_hat))
    {
        if !v.is_finite() {
            return Err(Error::NonFinite("effect estimates"));
        }
    }

    Ok(FitResult {
        vc: vc.clone(),
        mu_hat,
        var_mu,
        beta_hat,
        cov_beta,
        u_tilde,
        cov_u,
        reml_report: None,
        fixed_labels: frame.x_labels().to_vec(),
        block_labels: frame.blocks().iter().map(|b| b.label.clone()).collect(),
        block_ranges: frame.block_ranges(),
    })
}

/// `γ` repeated over the columns of each block.
pub(crate) fn column_gamma(frame: &ModelFrame, gamma: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(frame.p());
    for (i, block) in frame.blocks().iter().enumerate() {
        for c in block.range.clone() {
            g[c] = gamma[i];
        }
    }
    g
}

/// REML fit followed by [`solve_blue_blup_with`].
pub fn fit(
    frame: &ModelFrame,
    reml: &RemlConfig,
    inference: &InferenceConfig,
) -> Result<FitResult> {
    let report = fit_reml(frame, reml)?;
    let mut result = solve_blue_blup_with(frame, &report.estimates, inference)?;
    result.reml_report = Some(report);
    Ok(result)
}

/// Three expressions for the residual variance that coincide at a REML
/// stationary point:
///
/// ```text
/// (y − 1μ̂ − Xβ̂)ᵀH⁻¹(y − 1μ̂ − Xβ̂) / (n − k − 1)
/// (y − Xβ̂)ᵀ K (y − Xβ̂) / (n − k − 1)
/// ‖K(y − Xβ̂)‖² / tr(P_H^I)
/// ```
pub fn sigma_eps2_forms(frame: &ModelFrame, fit: &FitResult) -> Result<[f64; 3]> {
    let state = KernelState::new(frame, &fit.vc.gamma())?;
    let df = (frame.n() - frame.k() - 1) as f64;
    let y = frame.y();
    let xb = frame.x() * &fit.beta_hat;
    let e = y - &xb;
    let full = e.add_scalar(-fit.mu_hat);
    let first = full.dot(&state.h_inv_apply_vec(&full)) / df;
    let ke = state.chc_inv_c_apply_vec(&e);
    let second = e.dot(&ke) / df;

    let xt = frame.x_tilde();
    let hxt = state.h_inv_apply(&xt);
    let m = SymFactor::new(xt.tr_mul(&hxt), "X~'H^-1 X~")?;
    let gram = hxt.tr_mul(&hxt);
    let tr_p = state.trace_h_inv() - linalg::trace_of_product(&m.inverse(), &gram);
    let third = ke.norm_squared() / tr_p;
    Ok([first, second, third])
}
