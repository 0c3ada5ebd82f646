//! Additive split of the sample variance of `y` after a REML fit:
//!
//! ```text
//! σ̂²_y = Ŝ²_X + S̃²_Z,pop + S̃²_Z,data + S̃²_{X×Z} + σ̂²_ε
//!
//! Ŝ²_X        = β̂ᵀΣ̂_Xβ̂ − tr(Σ̂_X Σ_β̂)
//! S̃²_Z,pop    = Σ_i σ̂²_{u_i} tr(Σ̂_{Z_i})
//! S̃²_Z,data   = ũᵀΣ̂_Zũ − tr(Σ̂_Z Σ_ũ)
//! S̃²_{X×Z}    = 2 β̂ᵀΣ̂_{XZ}ũ
//! ```
//!
//! Moments use the divisor `n − 1`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::inference::{FitResult, UCovariance};
use crate::linalg;

/// Storage of `Σ̂_Z`.
#[derive(Debug, Clone, PartialEq)]
pub enum ZMoments {
    /// `ZᵀCZ / (n − 1)`.
    Dense(DMatrix<f64>),
    /// `R = CZ / √(n − 1)`, so that `Σ̂_Z = RᵀR`. Used for large `p`.
    Factor(DMatrix<f64>),
}

/// Centred cross-moments of the design with divisor `n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub n: usize,
    pub sigma_hat_x: DMatrix<f64>,
    pub sigma_hat_z: ZMoments,
    pub sigma_hat_xz: DMatrix<f64>,
    pub sigma_hat_y2: f64,
    /// `yᵀCy`.
    pub tss: f64,
    /// `tr(Σ̂_{Z_i})` per block.
    pub tr_sigma_z: Vec<f64>,
    /// `‖Z_i‖²_F` per block.
    pub z_sq_norms: Vec<f64>,
    pub block_ranges: Vec<Range<usize>>,
}

impl EmpiricalMoments {
    /// `Σ̂_Z v`.
    pub fn sigma_z_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.sigma_hat_z {
            ZMoments::Dense(s) => s * v,
            ZMoments::Factor(r) => r.tr_mul(&(r * v)),
        }
    }

    /// `diag(Σ̂_Z Σ_ũ)`.
    fn sz_cov_diag(&self, cov_u: &UCovariance) -> DVector<f64> {
        match (cov_u, &self.sigma_hat_z) {
            (UCovariance::Reduced { sz_cov_diag, .. }, _) => sz_cov_diag.clone(),
            (UCovariance::Dense(c), ZMoments::Dense(s)) => {
                DVector::from_fn(c.nrows(), |a, _| s.row(a).transpose().dot(&c.column(a)))
            }
            (UCovariance::Dense(c), ZMoments::Factor(r)) => {
                let rc = r * c;
                DVector::from_fn(c.nrows(), |a, _| r.column(a).dot(&rc.column(a)))
            }
        }
    }
}

/// Moments with dense `Σ̂_Z` up to `p = 2000`.
pub fn compute_moments(frame: &ModelFrame) -> EmpiricalMoments {
    compute_moments_with_cap(frame, 2000)
}

pub fn compute_moments_with_cap(frame: &ModelFrame, dense_cap: usize) -> EmpiricalMoments {
    let n = frame.n();
    let d = n as f64 - 1.0;
    let cx = linalg::center_columns(frame.x());
    let cz = linalg::center_columns(frame.z());
    let cy = linalg::center_vec(frame.y());
    let sigma_hat_x = cx.tr_mul(&cx) / d;
    let sigma_hat_xz = cx.tr_mul(&cz) / d;
    let tss = cy.norm_squared();
    let block_ranges = frame.block_ranges();
    let tr_sigma_z = block_ranges
        .iter()
        .map(|r| cz.columns(r.start, r.len()).norm_squared() / d)
        .collect();
    let z_sq_norms = (0..frame.r())
        .map(|i| frame.z_block(i).norm_squared())
        .collect();
    let sigma_hat_z = if frame.p() <= dense_cap {
        let mut s = cz.tr_mul(&cz) / d;
        linalg::symmetrize(&mut s);
        ZMoments::Dense(s)
    } else {
        ZMoments::Factor(cz / linalg::sqrt(d))
    };
    EmpiricalMoments {
        n,
        sigma_hat_x,
        sigma_hat_z,
        sigma_hat_xz,
        sigma_hat_y2: tss / d,
        tss,
        tr_sigma_z,
        z_sq_norms,
        block_ranges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub s_x2: f64,
    pub s_z2_pop: f64,
    pub s_z2_data: f64,
    pub s_xz2: f64,
    pub sigma_eps2: f64,
    pub sigma_y2: f64,
    /// `1 − σ̂²_ε / σ̂²_y`.
    pub r2: f64,
    /// `(Ŝ²_X + S̃²_Z,pop) / (Ŝ²_X + S̃²_Z,pop + σ̂²_ε)`.
    pub r2_pop: f64,
    pub r2_marginal_naka: f64,
    pub r2_conditional_naka: f64,
    /// Uncorrected `β̂ᵀΣ̂_Xβ̂`.
    pub sigma_f2: f64,
    /// `Σ_i σ̂²_{u_i} ‖Z_i‖²_F / n`.
    pub sigma_l2: f64,
    /// False when the underlying REML fit did not converge; the identity then
    /// holds only approximately.
    pub converged: bool,
}

impl Decomposition {
    pub fn explained_total(&self) -> f64 {
        self.s_x2 + self.s_z2_pop + self.s_z2_data + self.s_xz2
    }

    /// `|σ̂²_y − (sum of summands)| / σ̂²_y`.
    pub fn identity_residual(&self) -> f64 {
        (self.sigma_y2 - self.explained_total() - self.sigma_eps2).abs() / self.sigma_y2
    }
}

pub fn decompose(fit: &FitResult, moments: &EmpiricalMoments) -> Decomposition {
    let beta = &fit.beta_hat;
    let sx = &moments.sigma_hat_x;
    let sigma_f2 = beta.dot(&(sx * beta));
    let s_x2 = sigma_f2 - linalg::trace_of_product(sx, &fit.cov_beta);
    let s_z2_pop: f64 = fit
        .vc
        .sigma_u2
        .iter()
        .zip(&moments.tr_sigma_z)
        .map(|(s, t)| s * t)
        .sum();
    let u = &fit.u_tilde;
    let szu = moments.sigma_z_mul(u);
    let s_z2_data = u.dot(&szu) - moments.sz_cov_diag(&fit.cov_u).sum();
    let s_xz2 = 2.0 * beta.dot(&(&moments.sigma_hat_xz * u));
    let sigma_eps2 = fit.vc.sigma_eps2;
    let sigma_y2 = moments.sigma_hat_y2;
    let sigma_l2: f64 = fit
        .vc
        .sigma_u2
        .iter()
        .zip(&moments.z_sq_norms)
        .map(|(s, z)| s * z)
        .sum::<f64>()
        / moments.n as f64;
    let naka_total = sigma_f2 + sigma_l2 + sigma_eps2;
    Decomposition {
        s_x2,
        s_z2_pop,
        s_z2_data,
        s_xz2,
        sigma_eps2,
        sigma_y2,
        r2: 1.0 - sigma_eps2 / sigma_y2,
        r2_pop: (s_x2 + s_z2_pop) / (s_x2 + s_z2_pop + sigma_eps2),
        r2_marginal_naka: sigma_f2 / naka_total,
        r2_conditional_naka: (sigma_f2 + sigma_l2) / naka_total,
        sigma_f2,
        sigma_l2,
        converged: fit.converged(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributionKind {
    Fixed,
    RandomPopulation,
    RandomData,
    CrossFixed,
    CrossRandom,
    Residual,
}

impl AttributionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributionKind::Fixed => "fixed",
            AttributionKind::RandomPopulation => "random-population",
            AttributionKind::RandomData => "random-data",
            AttributionKind::CrossFixed => "cross-fixed",
            AttributionKind::CrossRandom => "cross-random",
            AttributionKind::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRow {
    pub label: String,
    pub kind: AttributionKind,
    /// Variance units of `y`.
    pub value: f64,
}

/// One row per fixed covariate: `Σ_j (Σ̂_X)_{ij} [β̂_iβ̂_j − (Σ_β̂)_{ij}]`.
pub fn attribute_fixed(fit: &FitResult, moments: &EmpiricalMoments) -> Vec<AttributionRow> {
    let beta = &fit.beta_hat;
    let k = beta.len();
    (0..k)
        .map(|i| {
            let value = (0..k)
                .map(|j| moments.sigma_hat_x[(i, j)] * (beta[i] * beta[j] - fit.cov_beta[(i, j)]))
                .sum();
            AttributionRow {
                label: fit.fixed_labels[i].clone(),
                kind: AttributionKind::Fixed,
                value,
            }
        })
        .collect()
}

/// Per block: population row `σ̂²_{u_i} tr(Σ̂_{Z_i})`, then data row
/// `ũ_iᵀ(Σ̂_Zũ)_i − tr((Σ̂_ZΣ_ũ)_{ii})`.
pub fn attribute_random(fit: &FitResult, moments: &EmpiricalMoments) -> Vec<AttributionRow> {
    let u = &fit.u_tilde;
    let szu = moments.sigma_z_mul(u);
    let diag = moments.sz_cov_diag(&fit.cov_u);
    let mut rows = Vec::with_capacity(2 * fit.block_ranges.len());
    for (i, range) in fit.block_ranges.iter().enumerate() {
        let label = &fit.block_labels[i];
        rows.push(AttributionRow {
            label: label.clone(),
            kind: AttributionKind::RandomPopulation,
            value: fit.vc.sigma_u2[i] * moments.tr_sigma_z[i],
        });
        let data: f64 = range.clone().map(|a| u[a] * szu[a] - diag[a]).sum();
        rows.push(AttributionRow {
            label: label.clone(),
            kind: AttributionKind::RandomData,
            value: data,
        });
    }
    rows
}

/// `k` fixed rows `β̂_j (Σ̂_{XZ}ũ)_j`, then `r` random rows
/// `ũ_iᵀ(Σ̂_{XZ}ᵀβ̂)_i`. Empty unless `k ≥ 1` and `r ≥ 1`.
pub fn attribute_cross(fit: &FitResult, moments: &EmpiricalMoments) -> Vec<AttributionRow> {
    let beta = &fit.beta_hat;
    let u = &fit.u_tilde;
    if beta.is_empty() || fit.block_ranges.is_empty() {
        return Vec::new();
    }
    let sxz = &moments.sigma_hat_xz;
    let xzu = sxz * u;
    let zxb = sxz.tr_mul(beta);
    let mut rows: Vec<AttributionRow> = (0..beta.len())
        .map(|j| AttributionRow {
            label: fit.fixed_labels[j].clone(),
            kind: AttributionKind::CrossFixed,
            value: beta[j] * xzu[j],
        })
        .collect();
    for (i, range) in fit.block_ranges.iter().enumerate() {
        rows.push(AttributionRow {
            label: fit.block_labels[i].clone(),
            kind: AttributionKind::CrossRandom,
            value: range.clone().map(|a| u[a] * zxb[a]).sum(),
        });
    }
    rows
}

/// All attribution rows plus the residual, with shares relative to `σ̂²_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTable {
    pub rows: Vec<AttributionRow>,
    pub sigma_y2: f64,
}

impl AttributionTable {
    pub fn share(&self, row: &AttributionRow) -> f64 {
        row.value / self.sigma_y2
    }

    pub fn total(&self, kind: AttributionKind) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.value)
            .sum()
    }

    pub fn get(&self, kind: AttributionKind, label: &str) -> Option<&AttributionRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.label == label)
    }
}

pub fn attribution_table(fit: &FitResult, moments: &EmpiricalMoments) -> AttributionTable {
    let mut rows = attribute_fixed(fit, moments);
    rows.extend(attribute_random(fit, moments));
    rows.extend(attribute_cross(fit, moments));
    rows.push(AttributionRow {
        label: String::from("residual"),
        kind: AttributionKind::Residual,
        value: fit.vc.sigma_eps2,
    });
    AttributionTable {
        rows,
        sigma_y2: moments.sigma_hat_y2,
    }
}

/// Ordinary least squares of `y` on `X̃`, ignoring random blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReference {
    pub r2: f64,
    pub r2_adj: f64,
    pub ess: f64,
    pub rss: f64,
    pub tss: f64,
}

pub fn lm_reference(frame: &ModelFrame) -> Result<LmReference> {
    let n = frame.n();
    let k = frame.k();
    let xt = frame.x_tilde();
    let qr = xt.clone().qr();
    let qty = qr.q().tr_mul(frame.y());
    let coef = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient {
            rank: linalg::column_rank(&xt),
            columns: k + 1,
        })?;
    let fitted = &xt * coef;
    let rss = (frame.y() - &fitted).norm_squared();
    let tss = linalg::center_vec(frame.y()).norm_squared();
    let ess = linalg::center_vec(&fitted).norm_squared();
    if !(tss > 0.0) {
        return Err(Error::DegenerateFrame(format!(
            "response has zero total sum of squares (n = {n})"
        )));
    }
    let r2 = 1.0 - rss / tss;
    let r2_adj = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - k as f64 - 1.0);
    Ok(LmReference {
        r2,
        r2_adj,
        ess,
        rss,
        tss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{fit, solve_blue_blup, solve_blue_blup_with, InferenceConfig};
    use crate::reml::{RemlConfig, VarianceComponents};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(n: usize, k: usize, sizes: &[usize], seed: u64) -> ModelFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |_: usize, _: usize| rng.random::<f64>() * 2.0 - 1.0;
        let x = DMatrix::from_fn(n, k, &mut u);
        let blocks: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| (format!("b{i}"), DMatrix::from_fn(n, p, &mut u)))
            .collect();
        let mut y = DVector::from_fn(n, |i, j| u(i, j));
        y += &x * DVector::from_element(k, 1.0);
        for (_, z) in &blocks {
            y += z * DVector::from_fn(z.ncols(), |i, j| u(i, j));
        }
        let labels = (0..k).map(|j| format!("x{j}")).collect();
        ModelFrame::new("y", y, x, labels, blocks).unwrap()
    }

    #[test]
    fn centred_sign_column_moment() {
        let x = DMatrix::from_fn(6, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let f = ModelFrame::new(
            "y",
            DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 0.0, 1.0]),
            x,
            vec!["x".into()],
            vec![],
        )
        .unwrap();
        let m = compute_moments(&f);
        assert!((m.sigma_hat_x[(0, 0)] - 6.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn constant_z_column_has_zero_moments() {
        let mut z = DMatrix::from_fn(8, 3, |i, j| ((i * 7 + j * 3) % 5) as f64);
        z.column_mut(1).fill(2.0);
        let f = ModelFrame::new(
            "y",
            DVector::from_fn(8, |i, _| i as f64),
            DMatrix::zeros(8, 0),
            vec![],
            vec![("g".into(), z)],
        )
        .unwrap();
        match compute_moments(&f).sigma_hat_z {
            ZMoments::Dense(s) => {
                assert!(s.row(1).amax() == 0.0 && s.column(1).amax() == 0.0);
            }
            ZMoments::Factor(_) => unreachable!(),
        }
    }

    #[test]
    fn identity_holds_at_reml_solution() {
        for seed in 0..5 {
            let f = frame(60, 2, &[5, 7], seed);
            let res = fit(&f, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
            assert!(res.converged());
            let d = decompose(&res, &compute_moments(&f));
            assert!(d.identity_residual() < 1e-8, "{d:?}");
        }
    }

    #[test]
    fn partial_rows_sum_to_totals() {
        let f = frame(40, 3, &[4, 6], 9);
        let res = fit(&f, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
        let m = compute_moments(&f);
        let d = decompose(&res, &m);
        let t = attribution_table(&res, &m);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(t.total(AttributionKind::Fixed), d.s_x2) < 1e-10);
        assert!(rel(t.total(AttributionKind::RandomPopulation), d.s_z2_pop) < 1e-10);
        assert!(rel(t.total(AttributionKind::RandomData), d.s_z2_data) < 1e-10);
        let cross = t.total(AttributionKind::CrossFixed) + t.total(AttributionKind::CrossRandom);
        assert!(rel(cross, d.s_xz2) < 1e-10);
        assert!(
            (t.total(AttributionKind::CrossFixed) - t.total(AttributionKind::CrossRandom)).abs()
                < 1e-12 * d.sigma_y2
        );
    }

    #[test]
    fn factor_storage_matches_dense() {
        let f = frame(20, 1, &[8, 9], 4);
        let vc = VarianceComponents::new(0.5, vec![0.3, 0.1]).unwrap();
        let dense = decompose(&solve_blue_blup(&f, &vc).unwrap(), &compute_moments(&f));
        let small = InferenceConfig { dense_cov_cap: 3 };
        let res = solve_blue_blup_with(&f, &vc, &small).unwrap();
        let reduced = decompose(&res, &compute_moments_with_cap(&f, 3));
        let mixed = decompose(
            &solve_blue_blup(&f, &vc).unwrap(),
            &compute_moments_with_cap(&f, 3),
        );
        for other in [reduced, mixed] {
            assert!((other.s_z2_data - dense.s_z2_data).abs() < 1e-12);
            assert!((other.s_xz2 - dense.s_xz2).abs() < 1e-12);
            assert!((other.s_z2_pop - dense.s_z2_pop).abs() < 1e-12);
        }
    }

    #[test]
    fn no_random_blocks_gives_adjusted_r2() {
        let f = frame(50, 2, &[], 5);
        let res = fit(&f, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
        let d = decompose(&res, &compute_moments(&f));
        let lm = lm_reference(&f).unwrap();
        assert_eq!((d.s_z2_pop, d.s_z2_data, d.s_xz2), (0.0, 0.0, 0.0));
        assert!((d.r2 - lm.r2_adj).abs() < 1e-12);
        assert!((lm.tss - lm.ess - lm.rss).abs() < 1e-10 * lm.tss);
    }

    #[test]
    fn exact_fit_reference() {
        let x = DMatrix::from_fn(5, 1, |i, _| (i * i) as f64);
        let y = DVector::from_fn(5, |i, _| 2.0 * (i * i) as f64 + 1.0);
        let f = ModelFrame::new("y", y, x, vec!["x".into()], vec![]).unwrap();
        let lm = lm_reference(&f).unwrap();
        assert!((lm.r2 - 1.0).abs() < 1e-12 && (lm.r2_adj - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_fixed_row_equals_total() {
        let f = frame(30, 1, &[3], 6);
        let res = fit(&f, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
        let m = compute_moments(&f);
        let rows = attribute_fixed(&res, &m);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].value - decompose(&res, &m).s_x2).abs() < 1e-14);
    }
}
