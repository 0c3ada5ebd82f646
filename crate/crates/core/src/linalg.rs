use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Which factorization a solve went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Cholesky,
    /// Pivoted LU, used when Cholesky pivots break down.
    Lu,
}

/// Factorization of a symmetric (normally positive definite) matrix.
#[derive(Debug, Clone)]
pub(crate) enum SymFactor {
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl SymFactor {
    pub fn new(m: DMatrix<f64>, what: &'static str) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        match m.clone().cholesky() {
            Some(c) => Ok(SymFactor::Chol(c)),
            None => {
                let lu = m.lu();
                if !lu.is_invertible() {
                    return Err(Error::Factorization(what));
                }
                let det = lu.determinant();
                if det == 0.0 || !det.is_finite() {
                    return Err(Error::Factorization(what));
                }
                Ok(SymFactor::Lu(lu))
            }
        }
    }

    pub fn kind(&self) -> FactorKind {
        match self {
            SymFactor::Chol(_) => FactorKind::Cholesky,
            SymFactor::Lu(_) => FactorKind::Lu,
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SymFactor::Chol(c) => c.solve(b),
            SymFactor::Lu(lu) => lu.solve(b).expect("invertibility checked at construction"),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SymFactor::Chol(c) => c.solve(b),
            SymFactor::Lu(lu) => lu.solve(b).expect("invertibility checked at construction"),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match self {
            SymFactor::Chol(c) => c.inverse(),
            SymFactor::Lu(lu) => lu
                .try_inverse()
                .expect("invertibility checked at construction"),
        }
    }

    /// `ln |det|`.
    pub fn ln_det(&self) -> f64 {
        match self {
            SymFactor::Chol(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| ln(*d)).sum::<f64>(),
            SymFactor::Lu(lu) => {
                let u = lu.u();
                u.diagonal().iter().map(|d| ln(d.abs())).sum()
            }
        }
    }
}

/// Numerical column rank by column-pivoted QR, with tolerance
/// `n · ε · (largest column norm)`.
pub(crate) fn column_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    let max_norm = m.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    if max_norm == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * max_norm;
    let r = m.clone().col_piv_qr().r();
    r.diagonal().iter().filter(|d| d.abs() > tol).count()
}

/// `C m`: subtract column means.
pub(crate) fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

pub(crate) fn center_vec(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.mean();
    v.add_scalar(-mean)
}

/// `tr(A B)` without forming the product.
pub(crate) fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
