//! Solves with `H = I + Z G Zᵀ` and its centred variant `H_C = I + C Z G Zᵀ C`.
//!
//! `G = diag(γ_i I_{p_i})` holds the variance ratios `γ_i = σ²_{u_i} / σ²_ε`.
//! With `W = Z_a G_a^{1/2}` over the active (γ_i > 0) blocks,
//!
//! ```text
//! H⁻¹ m = m − W (I + WᵀW)⁻¹ Wᵀ m,      log det H = log det (I + WᵀW)
//! ```
//!
//! which is used while `p_active < n`. Otherwise `H` itself is factorized.
//! Centred solves never form `H_C`:
//!
//! ```text
//! C H_C⁻¹ C m = H⁻¹ m − a⁻¹ H⁻¹1 (1ᵀ H⁻¹ m),      a = 1ᵀ H⁻¹ 1
//! ```

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
pub use crate::linalg::FactorKind;
use crate::linalg::{self, SymFactor};

#[derive(Debug, Clone)]
enum Repr {
    Identity,
    Woodbury {
        w: DMatrix<f64>,
        cols: Vec<usize>,
        scale: DVector<f64>,
        factor: SymFactor,
    },
    Dense {
        factor: SymFactor,
    },
}

/// Factorized `H` for one value of `γ`. Immutable once built.
#[derive(Debug, Clone)]
pub struct KernelState {
    frame: ModelFrame,
    gamma: Vec<f64>,
    active: Vec<usize>,
    repr: Repr,
    h_inv_ones: DVector<f64>,
    a: f64,
    ln_det_h: f64,
}

impl KernelState {
    pub fn new(frame: &ModelFrame, gamma: &[f64]) -> Result<Self> {
        if gamma.len() != frame.r() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} variance ratios for {} random blocks",
                gamma.len(),
                frame.r()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidArgument(
                "variance ratios must be finite and non-negative".into(),
            ));
        }
        let n = frame.n();
        let active: Vec<usize> = (0..frame.r()).filter(|&i| gamma[i] > 0.0).collect();
        let mut cols = Vec::new();
        let mut scale = Vec::new();
        for &i in &active {
            let range = frame.blocks()[i].range.clone();
            let s = linalg::sqrt(gamma[i]);
            for c in range {
                cols.push(c);
                scale.push(s);
            }
        }
        let p_a = cols.len();
        let z = frame.z();

        let (repr, ln_det_h) = if p_a == 0 {
            (Repr::Identity, 0.0)
        } else {
            let mut w = DMatrix::zeros(n, p_a);
            for (j, (&c, &s)) in cols.iter().zip(&scale).enumerate() {
                w.column_mut(j).copy_from(&(z.column(c) * s));
            }
            if p_a < n {
                let mut a_mat = match frame.ztz() {
                    Some(ztz) => DMatrix::from_fn(p_a, p_a, |i, j| {
                        scale[i] * ztz[(cols[i], cols[j])] * scale[j]
                    }),
                    None => w.tr_mul(&w),
                };
                for i in 0..p_a {
                    a_mat[(i, i)] += 1.0;
                }
                let factor = SymFactor::new(a_mat, "I + G^1/2 Z'Z G^1/2")?;
                let ln_det = factor.ln_det();
                (
                    Repr::Woodbury {
                        w,
                        cols,
                        scale: DVector::from_vec(scale),
                        factor,
                    },
                    ln_det,
                )
            } else {
                let mut h = &w * w.transpose();
                for i in 0..n {
                    h[(i, i)] += 1.0;
                }
                let factor = SymFactor::new(h, "H")?;
                let ln_det = factor.ln_det();
                (Repr::Dense { factor }, ln_det)
            }
        };
        if !ln_det_h.is_finite() {
            return Err(Error::NonFinite("log det H"));
        }

        let mut state = KernelState {
            frame: frame.clone(),
            gamma: gamma.to_vec(),
            active,
            repr,
            h_inv_ones: DVector::zeros(0),
            a: 0.0,
            ln_det_h,
        };
        let ones = DVector::from_element(n, 1.0);
        state.h_inv_ones = state.h_inv_apply_vec(&ones);
        state.a = state.h_inv_ones.sum();
        if !(state.a > 0.0 && state.a.is_finite()) {
            return Err(Error::Factorization("1'H^-1 1 is not positive"));
        }
        Ok(state)
    }

    pub fn frame(&self) -> &ModelFrame {
        &self.frame
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Blocks with `γ_i > 0`.
    pub fn active_blocks(&self) -> &[usize] {
        &self.active
    }

    /// `1ᵀ H⁻¹ 1`.
    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn h_inv_ones(&self) -> &DVector<f64> {
        &self.h_inv_ones
    }

    pub fn ln_det_h(&self) -> f64 {
        self.ln_det_h
    }

    /// True when solves go through the `p_active × p_active` system.
    pub fn uses_woodbury(&self) -> bool {
        matches!(self.repr, Repr::Woodbury { .. })
    }

    /// Factorization used, `None` when `H = I`.
    pub fn factor_kind(&self) -> Option<FactorKind> {
        match &self.repr {
            Repr::Identity => None,
            Repr::Woodbury { factor, .. } | Repr::Dense { factor } => Some(factor.kind()),
        }
    }

    /// `H⁻¹ m`.
    pub fn h_inv_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.repr {
            Repr::Identity => m.clone(),
            Repr::Woodbury { w, factor, .. } => {
                let t = factor.solve(&w.tr_mul(m));
                m - w * t
            }
            Repr::Dense { factor } => factor.solve(m),
        }
    }

    pub fn h_inv_apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Identity => v.clone(),
            Repr::Woodbury { w, factor, .. } => {
                let t = factor.solve_vec(&w.tr_mul(v));
                v - w * t
            }
            Repr::Dense { factor } => factor.solve_vec(v),
        }
    }

    /// `H⁻¹ Z` for the frame's full `Z`, reusing the cached `ZᵀZ` when present.
    pub fn h_inv_z(&self) -> DMatrix<f64> {
        let z = self.frame.z();
        match (&self.repr, self.frame.ztz()) {
            (
                Repr::Woodbury {
                    w,
                    cols,
                    scale,
                    factor,
                },
                Some(ztz),
            ) => {
                let p = z.ncols();
                let wtz = DMatrix::from_fn(cols.len(), p, |i, j| scale[i] * ztz[(cols[i], j)]);
                z - w * factor.solve(&wtz)
            }
            _ => self.h_inv_apply(z),
        }
    }

    /// `C H_C⁻¹ C m`, with zero column means.
    pub fn chc_inv_c_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.h_inv_apply(m);
        self.deflate(m, &mut out);
        out
    }

    pub fn chc_inv_c_apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let hv = self.h_inv_apply_vec(v);
        let coef = self.h_inv_ones.dot(v) / self.a;
        hv - &self.h_inv_ones * coef
    }

    /// Turns `out = H⁻¹ m` into `C H_C⁻¹ C m`.
    fn deflate(&self, m: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let coef = self.h_inv_ones.dot(&m.column(j)) / self.a;
            col.axpy(-coef, &self.h_inv_ones, 1.0);
        }
    }

    /// `tr(H⁻¹)`.
    pub fn trace_h_inv(&self) -> f64 {
        let n = self.frame.n() as f64;
        match &self.repr {
            Repr::Identity => n,
            Repr::Woodbury { cols, factor, .. } => n - cols.len() as f64 + factor.inverse().trace(),
            Repr::Dense { factor } => factor.inverse().trace(),
        }
    }

    /// Dense `n × n` projection matrices for the frame's `X`. Small `n` only.
    pub fn projections(&self) -> Result<Projections> {
        let n = self.frame.n();
        let x = self.frame.x();
        let ones = DVector::from_element(n, 1.0);
        let h_inv = self.h_inv_apply(&DMatrix::identity(n, n));
        let chc = self.chc_inv_c_apply(&DMatrix::identity(n, n));

        let hx = &h_inv * x;
        let xhx = SymFactor::new(x.tr_mul(&hx), "X'H^-1 X")?;
        let p_h = &h_inv - &hx * xhx.solve(&hx.transpose());

        let xt = self.frame.x_tilde();
        let hxt = &h_inv * &xt;
        let m = SymFactor::new(xt.tr_mul(&hxt), "X~'H^-1 X~")?;
        let p_i = &h_inv - &hxt * m.solve(&hxt.transpose());

        let b = ones.dot(&(&p_h * &ones));
        let kx = &chc * x;
        let b_mat = x.tr_mul(&kx);
        Ok(Projections {
            a: self.a,
            b,
            h_inv,
            chc_inv_c: chc,
            p_h,
            p_i,
            b_mat,
        })
    }
}

/// Dense projection matrices and scalars built from one [`KernelState`].
#[derive(Debug, Clone)]
pub struct Projections {
    pub a: f64,
    /// `1ᵀ P_H 1`.
    pub b: f64,
    pub h_inv: DMatrix<f64>,
    /// `C H_C⁻¹ C`.
    pub chc_inv_c: DMatrix<f64>,
    /// `H⁻¹ − H⁻¹X(XᵀH⁻¹X)⁻¹XᵀH⁻¹`.
    pub p_h: DMatrix<f64>,
    /// `H⁻¹ − H⁻¹X̃(X̃ᵀH⁻¹X̃)⁻¹X̃ᵀH⁻¹`.
    pub p_i: DMatrix<f64>,
    /// `Xᵀ C H_C⁻¹ C X`.
    pub b_mat: DMatrix<f64>,
}

/// Largest deviations found by [`identity_suite`], each relative to the
/// largest entry of the right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    /// `C H_C⁻¹ = H_C⁻¹ C = C H_C⁻¹ C = H⁻¹(I − a⁻¹ 1 1ᵀ H⁻¹)`.
    pub centred_inverse: f64,
    /// `P_H^I = P_H (I − b⁻¹ 1 1ᵀ P_H)`.
    pub intercept_projection: f64,
    /// `C P_H^C C = C P_H^C = P_H^C C = P_H^I`.
    pub centred_projection: f64,
    /// `b = a − (1ᵀH⁻¹X)(XᵀH⁻¹X)⁻¹(XᵀH⁻¹1)`.
    pub b_scalar: f64,
}

impl IdentityReport {
    pub fn max(&self) -> f64 {
        self.centred_inverse
            .max(self.intercept_projection)
            .max(self.centred_projection)
            .max(self.b_scalar)
    }
}

fn rel_dev(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    let scale = rhs.amax().max(f64::MIN_POSITIVE);
    (lhs - rhs).amax() / scale
}

/// Checks the centred-inverse and projection identities densely, forming
/// `H_C` explicitly. `x` replaces the frame's fixed design. Small `n` only.
pub fn identity_suite(state: &KernelState, x: &DMatrix<f64>) -> Result<IdentityReport> {
    let frame = state.frame();
    let n = frame.n();
    let ones = DVector::from_element(n, 1.0);
    let c = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);

    let mut g = DMatrix::zeros(frame.p(), frame.p());
    for (i, block) in frame.blocks().iter().enumerate() {
        for j in block.range.clone() {
            g[(j, j)] = state.gamma()[i];
        }
    }
    let z = frame.z();
    let zgz = z * &g * z.transpose();
    let h_c = DMatrix::identity(n, n) + &c * &zgz * &c;
    let h_c_inv = SymFactor::new(h_c, "H_C")?.inverse();

    let h_inv = state.h_inv_apply(&DMatrix::identity(n, n));
    let hi1 = &state.h_inv_ones;
    let rhs = &h_inv - hi1 * hi1.transpose() / state.a();
    let centred_inverse = rel_dev(&(&c * &h_c_inv), &rhs)
        .max(rel_dev(&(&h_c_inv * &c), &rhs))
        .max(rel_dev(&(&c * &h_c_inv * &c), &rhs))
        .max(rel_dev(
            &state.chc_inv_c_apply(&DMatrix::identity(n, n)),
            &rhs,
        ));

    let (p_h, b) = if x.ncols() == 0 {
        (h_inv.clone(), state.a())
    } else {
        let hx = &h_inv * x;
        let xhx = SymFactor::new(x.tr_mul(&hx), "X'H^-1 X")?;
        let p_h = &h_inv - &hx * xhx.solve(&hx.transpose());
        let b = ones.dot(&(&p_h * &ones));
        (p_h, b)
    };
    let b_alt = if x.ncols() == 0 {
        state.a()
    } else {
        let hx = &h_inv * x;
        let xhx = SymFactor::new(x.tr_mul(&hx), "X'H^-1 X")?;
        let v = x.tr_mul(hi1);
        state.a() - v.dot(&xhx.solve_vec(&v))
    };
    let b_scalar = (b - b_alt).abs() / b.abs().max(f64::MIN_POSITIVE);

    let mut xt = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    xt.columns_mut(1, x.ncols()).copy_from(x);
    let hxt = &h_inv * &xt;
    let m = SymFactor::new(xt.tr_mul(&hxt), "X~'H^-1 X~")?;
    let p_i = &h_inv - &hxt * m.solve(&hxt.transpose());

    let p_h1 = &p_h * &ones;
    let rhs = &p_h - &p_h1 * p_h1.transpose() / b;
    let intercept_projection = rel_dev(&p_i, &rhs);

    let cx = &c * x;
    let hcx = &h_c_inv * &cx;
    let p_c = if x.ncols() == 0 {
        h_c_inv.clone()
    } else {
        let inner = SymFactor::new(cx.tr_mul(&hcx), "X'C H_C^-1 C X")?;
        &h_c_inv - &hcx * inner.solve(&hcx.transpose())
    };
    let centred_projection = rel_dev(&(&c * &p_c * &c), &p_i)
        .max(rel_dev(&(&c * &p_c), &p_i))
        .max(rel_dev(&(&p_c * &c), &p_i));

    Ok(IdentityReport {
        centred_inverse,
        intercept_projection,
        centred_projection,
        b_scalar,
    })
}
