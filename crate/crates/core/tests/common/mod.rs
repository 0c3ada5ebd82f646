//! Shared test support: random instances and a dense oracle that forms every
//! matrix (V, H, H_C, C, the projections) explicitly and inverts with LU.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vardecomp_core::{ModelFrame, VarianceComponents};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// One-hot indicator of `levels` groups, every level hit at least once.
pub fn indicator(rng: &mut ChaCha8Rng, n: usize, levels: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, levels);
    for i in 0..n {
        let g = if i < levels { i } else { rng.random_range(0..levels) };
        z[(i, g)] = 1.0;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    Indicator,
    Slope,
    Gaussian,
}

/// Random Z block of the given kind.
pub fn random_block(rng: &mut ChaCha8Rng, n: usize, p: usize, kind: BlockKind) -> DMatrix<f64> {
    match kind {
        BlockKind::Indicator => indicator(rng, n, p),
        BlockKind::Slope => {
            let mut z = indicator(rng, n, p);
            for i in 0..n {
                let t = normal(rng) + 2.0;
                z.row_mut(i).scale_mut(t);
            }
            z
        }
        BlockKind::Gaussian => gaussian_matrix(rng, n, p),
    }
}

pub fn random_kind(rng: &mut ChaCha8Rng) -> BlockKind {
    match rng.random_range(0..3) {
        0 => BlockKind::Indicator,
        1 => BlockKind::Slope,
        _ => BlockKind::Gaussian,
    }
}

/// Frame with Gaussian X (partly correlated with Z) and a response drawn
/// from the model at the given variance components.
pub fn simulate_frame(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    blocks: &[(usize, BlockKind)],
    sigma_eps2: f64,
    sigma_u2: &[f64],
) -> ModelFrame {
    try_simulate_frame(rng, n, k, blocks, sigma_eps2, sigma_u2).expect("valid simulated frame")
}

pub fn try_simulate_frame(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    blocks: &[(usize, BlockKind)],
    sigma_eps2: f64,
    sigma_u2: &[f64],
) -> vardecomp_core::Result<ModelFrame> {
    let zs: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|&(p, kind)| random_block(rng, n, p, kind))
        .collect();
    let mut x = gaussian_matrix(rng, n, k);
    if let Some(z0) = zs.first() {
        for j in 0..k {
            let c = rng.random_range(0..z0.ncols());
            let w = 0.5 * normal(rng);
            for i in 0..n {
                x[(i, j)] += w * z0[(i, c)];
            }
        }
    }
    let beta = DVector::from_fn(k, |_, _| normal(rng));
    let mut y = &x * &beta;
    y.add_scalar_mut(3.0 * normal(rng));
    for (z, s2) in zs.iter().zip(sigma_u2) {
        let u = DVector::from_fn(z.ncols(), |_, _| s2.sqrt() * normal(rng));
        y += z * u;
    }
    for i in 0..n {
        y[i] += sigma_eps2.sqrt() * normal(rng);
    }
    let labels = (0..k).map(|j| format!("x{j}")).collect();
    let z_blocks = zs
        .into_iter()
        .enumerate()
        .map(|(i, z)| (format!("b{i}"), z))
        .collect();
    ModelFrame::new("y", y, x, labels, z_blocks)
}

/// Uniformly random instance within the given ranges.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n_range: (usize, usize),
    k_max: usize,
    r_range: (usize, usize),
    p_range: (usize, usize),
) -> ModelFrame {
    loop {
        let n = rng.random_range(n_range.0..=n_range.1);
        let k = rng.random_range(0..=k_max.min(n.saturating_sub(3)));
        let r = rng.random_range(r_range.0..=r_range.1);
        let blocks: Vec<(usize, BlockKind)> = (0..r)
            .map(|_| {
                let kind = random_kind(rng);
                let hi = if kind == BlockKind::Gaussian { p_range.1 } else { p_range.1.min(n) };
                (rng.random_range(p_range.0..=hi.max(p_range.0)), kind)
            })
            .collect();
        let s_u: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..3.0)).collect();
        let s_e = rng.random_range(0.2..2.0);
        if let Ok(f) = try_simulate_frame(rng, n, k, &blocks, s_e, &s_u) {
            return f;
        }
    }
}

pub fn centering(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64)
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible oracle matrix")
}

/// Per-column variance ratios `G` as a diagonal.
pub fn column_gamma(frame: &ModelFrame, gamma: &[f64]) -> DMatrix<f64> {
    let mut g = DVector::zeros(frame.p());
    for (b, gi) in frame.blocks().iter().zip(gamma) {
        for c in b.range.clone() {
            g[c] = *gi;
        }
    }
    DMatrix::from_diagonal(&g)
}

/// Every matrix of the model at a fixed `γ`, formed densely.
pub struct Dense {
    pub n: usize,
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    pub hc: DMatrix<f64>,
    pub hc_inv: DMatrix<f64>,
    pub p_h: DMatrix<f64>,
    pub p_i: DMatrix<f64>,
    pub p_c: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
}

impl Dense {
    pub fn new(frame: &ModelFrame, gamma: &[f64]) -> Dense {
        Dense::with_x(frame, frame.x(), gamma)
    }

    pub fn with_x(frame: &ModelFrame, x: &DMatrix<f64>, gamma: &[f64]) -> Dense {
        let n = frame.n();
        let z = frame.z();
        let c = centering(n);
        let g = column_gamma(frame, gamma);
        let h = DMatrix::identity(n, n) + z * &g * z.transpose();
        let h_inv = inv(&h);
        let hc = DMatrix::identity(n, n) + &c * z * &g * z.transpose() * &c;
        let hc_inv = inv(&hc);
        let ones = DVector::from_element(n, 1.0);
        let mut xt = DMatrix::from_element(n, x.ncols() + 1, 1.0);
        xt.columns_mut(1, x.ncols()).copy_from(x);

        let proj = |hi: &DMatrix<f64>, m: &DMatrix<f64>| -> DMatrix<f64> {
            if m.ncols() == 0 {
                return hi.clone();
            }
            hi - hi * m * inv(&(m.transpose() * hi * m)) * m.transpose() * hi
        };
        let p_h = proj(&h_inv, x);
        let p_i = proj(&h_inv, &xt);
        let p_c = proj(&hc_inv, &(&c * x));
        let a = ones.dot(&(&h_inv * &ones));
        let b = ones.dot(&(&p_h * &ones));
        Dense {
            n,
            c,
            g,
            h,
            h_inv,
            hc,
            hc_inv,
            p_h,
            p_i,
            p_c,
            a,
            b,
        }
    }

    /// `−½[(n−k−1) ln σ²_ε + ln det H + ln det(X̃ᵀH⁻¹X̃) + yᵀP_H^I y/σ²_ε]`.
    pub fn loglik(&self, frame: &ModelFrame, sigma_eps2: f64) -> f64 {
        let xt = frame.x_tilde();
        let df = (frame.n() - frame.k() - 1) as f64;
        let y = frame.y();
        let m = xt.transpose() * &self.h_inv * &xt;
        -0.5 * (df * sigma_eps2.ln()
            + self.h.determinant().ln()
            + m.determinant().ln()
            + y.dot(&(&self.p_i * y)) / sigma_eps2)
    }
}

/// Fixed and random effect estimates from the defining formulas.
pub struct DenseFit {
    pub mu: f64,
    pub beta: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub u: DVector<f64>,
    pub cov_u: DMatrix<f64>,
}

pub fn dense_fit(frame: &ModelFrame, vc: &VarianceComponents) -> DenseFit {
    let d = Dense::new(frame, &vc.gamma());
    let x = frame.x();
    let z = frame.z();
    let y = frame.y();
    let s2 = vc.sigma_eps2;
    let cx = &d.c * x;
    let k_mat = &d.c * &d.hc_inv * &d.c;
    let b_inv = inv(&(x.transpose() * &k_mat * x));
    let beta = &b_inv * x.transpose() * &k_mat * y;
    let cov_beta = &b_inv * s2;
    let u = &d.g * z.transpose() * &k_mat * (y - x * &beta);
    let middle = &d.hc - &cx * &b_inv * cx.transpose();
    let cov_u = (&d.g * z.transpose() * &d.c * &d.hc_inv * middle * &d.hc_inv * &d.c * z * &d.g) * s2;
    let ones = DVector::from_element(frame.n(), 1.0);
    let mu = ones.dot(&(&d.p_h * y)) / d.b;
    DenseFit {
        mu,
        beta,
        cov_beta,
        u,
        cov_u,
    }
}

/// The four summands and the residual from the defining formulas.
pub struct DenseSummands {
    pub s_x2: f64,
    pub s_z2_pop: f64,
    pub s_z2_data: f64,
    pub s_xz2: f64,
    pub sigma_eps2: f64,
    pub sigma_y2: f64,
}

pub fn dense_summands(frame: &ModelFrame, vc: &VarianceComponents) -> DenseSummands {
    let f = dense_fit(frame, vc);
    let n = frame.n();
    let c = centering(n);
    let x = frame.x();
    let z = frame.z();
    let d = (n - 1) as f64;
    let sx = x.transpose() * &c * x / d;
    let sz = z.transpose() * &c * z / d;
    let sxz = x.transpose() * &c * z / d;
    let y = frame.y();
    let s_x2 = f.beta.dot(&(&sx * &f.beta)) - (&sx * &f.cov_beta).trace();
    let s_z2_pop: f64 = (0..frame.r())
        .map(|i| {
            let r = frame.blocks()[i].range.clone();
            vc.sigma_u2[i] * sz.view((r.start, r.start), (r.len(), r.len())).trace()
        })
        .sum();
    let s_z2_data = f.u.dot(&(&sz * &f.u)) - (&sz * &f.cov_u).trace();
    let s_xz2 = 2.0 * f.beta.dot(&(&sxz * &f.u));
    DenseSummands {
        s_x2,
        s_z2_pop,
        s_z2_data,
        s_xz2,
        sigma_eps2: vc.sigma_eps2,
        sigma_y2: y.dot(&(&c * y)) / d,
    }
}

/// Largest elementwise deviation relative to the largest entry of `b`.
pub fn rel_max(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    if a.is_empty() {
        return 0.0;
    }
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub const SLEEPSTUDY_CSV: &str = include_str!("../../../vardecomp/data/sleepstudy.csv");

/// The sleepstudy frame for `Reaction ~ Days + (Days || Subject)`.
pub fn sleepstudy() -> ModelFrame {
    use vardecomp_core::{build_model_frame, parse_formula, Column, Dataset};
    let mut reaction = Vec::new();
    let mut days = Vec::new();
    let mut subject = Vec::new();
    for line in SLEEPSTUDY_CSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        reaction.push(f[0].trim().parse::<f64>().unwrap());
        days.push(f[1].trim().parse::<f64>().unwrap());
        subject.push(f[2].trim().to_string());
    }
    let data = Dataset::new(vec![
        ("Reaction".into(), Column::Numeric(reaction)),
        ("Days".into(), Column::Numeric(days)),
        ("Subject".into(), Column::categorical(&subject)),
    ])
    .unwrap();
    let ast = parse_formula("Reaction ~ Days + (Days || Subject)").unwrap().ast;
    build_model_frame(&data, &ast).unwrap()
}

/// Frame with the same design and a different response.
pub fn with_y(frame: &ModelFrame, y: DVector<f64>) -> ModelFrame {
    frame.with_response(y).unwrap()
}

/// Frame with new `X` and `Z` blocks but the same response and labels.
pub fn rebuild(frame: &ModelFrame, y: DVector<f64>, x: DMatrix<f64>, z: &DMatrix<f64>) -> ModelFrame {
    let blocks = frame
        .blocks()
        .iter()
        .map(|b| {
            (
                b.label.clone(),
                z.columns(b.range.start, b.range.len()).into_owned(),
            )
        })
        .collect();
    ModelFrame::new(frame.response_name(), y, x, frame.x_labels().to_vec(), blocks).unwrap()
}

/// Restricted log-likelihood from an explicit `H`, via one LU factorization.
pub fn dense_loglik(frame: &ModelFrame, vc: &VarianceComponents) -> f64 {
    let n = frame.n();
    let z = frame.z();
    let g = column_gamma(frame, &vc.gamma());
    let h = DMatrix::identity(n, n) + z * g * z.transpose();
    let lu = h.lu();
    let xt = frame.x_tilde();
    let y = frame.y();
    let hx = lu.solve(&xt).unwrap();
    let hy = lu.solve(y).unwrap();
    let m = xt.transpose() * &hx;
    let m_inv = inv(&m);
    let py = &hy - &hx * (&m_inv * (xt.transpose() * &hy));
    let df = (n - frame.k() - 1) as f64;
    -0.5 * (df * vc.sigma_eps2.ln()
        + lu.determinant().ln()
        + m.determinant().ln()
        + y.dot(&py) / vc.sigma_eps2)
}
