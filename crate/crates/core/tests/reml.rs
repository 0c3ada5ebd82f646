mod common;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use common::*;
use nalgebra::{DMatrix, DVector};
use vardecomp_core::{
    fit, fit_reml, reml_equation_residuals, restricted_loglik, sigma_eps2_forms, Error,
    InferenceConfig, ModelFrame, RemlConfig, VarianceComponents,
};

/// Balanced one-way layout: `groups` groups with `reps` replicates each.
fn one_way(seed: u64, groups: usize, reps: usize, sigma_u: f64) -> (ModelFrame, f64, f64) {
    let mut rng = rng(seed);
    let n = groups * reps;
    let mut z = DMatrix::zeros(n, groups);
    let mut y = DVector::zeros(n);
    for g in 0..groups {
        let u = sigma_u * normal(&mut rng);
        for j in 0..reps {
            let i = g * reps + j;
            z[(i, g)] = 1.0;
            y[i] = 10.0 + u + normal(&mut rng);
        }
    }
    let means: Vec<f64> = (0..groups)
        .map(|g| (0..reps).map(|j| y[g * reps + j]).sum::<f64>() / reps as f64)
        .collect();
    let grand = y.mean();
    let msa = reps as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
        / (groups - 1) as f64;
    let mse = (0..n).map(|i| (y[i] - means[i / reps]).powi(2)).sum::<f64>()
        / (groups * (reps - 1)) as f64;
    let frame = ModelFrame::new("y", y, DMatrix::zeros(n, 0), vec![], vec![("g".into(), z)]).unwrap();
    (frame, mse, (msa - mse) / reps as f64)
}

#[test]
fn balanced_one_way_matches_anova() {
    let mut checked = 0;
    for (seed, groups, reps) in [(1, 4, 5), (2, 3, 4), (3, 4, 5), (4, 6, 3), (5, 3, 4)] {
        let (frame, mse, su) = one_way(seed, groups, reps, 1.5);
        if su <= 0.0 {
            continue;
        }
        let report = fit_reml(&frame, &RemlConfig::default()).unwrap();
        assert!(report.converged);
        assert!(rel(report.estimates.sigma_eps2, mse) <= 1e-8, "{report:?} vs {mse}");
        assert!(rel(report.estimates.sigma_u2[0], su) <= 1e-8, "{report:?} vs {su}");
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn negative_anova_estimate_lands_on_boundary() {
    for seed in 0..40 {
        let (frame, _, su) = one_way(100 + seed, 4, 5, 0.0);
        if su < 0.0 {
            let report = fit_reml(&frame, &RemlConfig::default()).unwrap();
            assert!(report.converged);
            assert_eq!(report.estimates.sigma_u2[0], 0.0);
            assert!(report.boundary_flags[0]);
            return;
        }
    }
    panic!("no seed produced a negative ANOVA estimate");
}

#[test]
fn no_random_blocks_gives_residual_mean_square() {
    let mut rng = rng(7);
    let n = 30;
    let x = gaussian_matrix(&mut rng, n, 2);
    let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 0)] - 2.0 * x[(i, 1)] + normal(&mut rng));
    let frame = ModelFrame::new("y", y.clone(), x.clone(), vec!["a".into(), "b".into()], vec![]).unwrap();
    let report = fit_reml(&frame, &RemlConfig::default()).unwrap();
    let xt = frame.x_tilde();
    let coef = (xt.transpose() * &xt).try_inverse().unwrap() * xt.transpose() * &y;
    let rss = (&y - &xt * coef).norm_squared();
    assert!(rel(report.estimates.sigma_eps2, rss / (n - 3) as f64) <= 1e-12);
    assert!(report.converged);
}

struct NegLoglik<'a>(&'a ModelFrame);

impl CostFunction for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, argmin::core::Error> {
        let vc = VarianceComponents::new(p[0].exp(), p[1..].iter().map(|v| v.exp()).collect())?;
        Ok(-dense_loglik(self.0, &vc))
    }
}

#[test]
fn sleepstudy_loglik_matches_generic_optimizer() {
    let frame = sleepstudy();
    let report = fit_reml(&frame, &RemlConfig::default()).unwrap();
    assert!(report.converged);
    let at_fit = restricted_loglik(&frame, &report.estimates).unwrap();
    assert!((at_fit - dense_loglik(&frame, &report.estimates)).abs() <= 1e-9 * at_fit.abs());
    assert!((at_fit - report.restricted_loglik).abs() <= 1e-9 * at_fit.abs());

    let start = vec![7.0, 6.0, 3.0];
    let simplex: Vec<Vec<f64>> = (0..4)
        .map(|j| {
            let mut v = start.clone();
            if j > 0 {
                v[j - 1] += 0.5;
            }
            v
        })
        .collect();
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-13).unwrap();
    let res = Executor::new(NegLoglik(&frame), solver)
        .configure(|s| s.max_iters(4000))
        .run()
        .unwrap();
    let best = -res.state().best_cost;
    assert!((best - at_fit).abs() <= 1e-6, "optimizer {best} vs fit {at_fit}");
    assert!(at_fit >= best - 1e-9);
}

#[test]
fn loglik_matches_dense_definition() {
    let mut rng = rng(21);
    for _ in 0..30 {
        let frame = random_instance(&mut rng, (6, 30), 3, (1, 3), (1, 15));
        let vc = VarianceComponents::new(
            0.5 + normal(&mut rng).abs(),
            (0..frame.r()).map(|_| normal(&mut rng).abs()).collect(),
        )
        .unwrap();
        let a = restricted_loglik(&frame, &vc).unwrap();
        let b = dense_loglik(&frame, &vc);
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn stationarity_and_three_residual_variance_forms() {
    let mut rng = rng(22);
    let mut converged = 0;
    for _ in 0..40 {
        let frame = random_instance(&mut rng, (15, 80), 3, (1, 3), (2, 12));
        let result = fit(&frame, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
        let report = result.reml_report.as_ref().unwrap();
        if !report.converged {
            continue;
        }
        converged += 1;
        let res = reml_equation_residuals(&frame, &report.estimates).unwrap();
        for (i, r) in res.iter().enumerate() {
            let exempt = i > 0 && report.boundary_flags[i - 1];
            assert!(exempt || *r <= 1e-6, "residual {i} = {r}");
        }
        let forms = sigma_eps2_forms(&frame, &result).unwrap();
        for f in forms {
            assert!(rel(f, report.estimates.sigma_eps2) <= 1e-8, "{forms:?}");
        }
        for w in report.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0));
        }
    }
    assert!(converged >= 30);
}

#[test]
fn estimates_scale_with_response() {
    let frame = sleepstudy();
    let base = fit_reml(&frame, &RemlConfig::default()).unwrap();
    let c = 2.5;
    let scaled = with_y(&frame, frame.y() * c);
    let other = fit_reml(&scaled, &RemlConfig::default()).unwrap();
    assert!(rel(other.estimates.sigma_eps2, c * c * base.estimates.sigma_eps2) <= 1e-8);
    for (a, b) in other.estimates.sigma_u2.iter().zip(&base.estimates.sigma_u2) {
        assert!(rel(*a, c * c * b) <= 1e-8);
    }
}

#[test]
fn estimates_invariant_to_centering() {
    let mut rng = rng(23);
    for _ in 0..10 {
        let frame = random_instance(&mut rng, (20, 60), 3, (1, 2), (2, 10));
        let base = fit_reml(&frame, &RemlConfig::default()).unwrap();
        if !base.converged {
            continue;
        }
        let mut x = frame.x().clone();
        for mut col in x.column_iter_mut() {
            col.add_scalar_mut(5.0 * normal(&mut rng));
        }
        let mut z = frame.z().clone();
        for mut col in z.column_iter_mut() {
            col.add_scalar_mut(normal(&mut rng));
        }
        let mut y = frame.y().clone();
        y.add_scalar_mut(-40.0);
        let shifted = rebuild(&frame, y, x, &z);
        let other = fit_reml(&shifted, &RemlConfig::default()).unwrap();
        assert!(rel(other.estimates.sigma_eps2, base.estimates.sigma_eps2) <= 1e-8, "{base:?}\n{other:?}");
        let scale = base.estimates.sigma_eps2;
        for (a, b) in other.estimates.sigma_u2.iter().zip(&base.estimates.sigma_u2) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3 * scale), "{a} vs {b}");
        }
    }
}

#[test]
fn constant_response_is_rejected() {
    let mut rng = rng(24);
    let z = indicator(&mut rng, 12, 3);
    let frame = ModelFrame::new(
        "y",
        DVector::from_element(12, 4.0),
        DMatrix::zeros(12, 0),
        vec![],
        vec![("g".into(), z)],
    )
    .unwrap();
    assert!(matches!(
        fit_reml(&frame, &RemlConfig::default()),
        Err(Error::DegenerateFrame(_))
    ));
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let frame = sleepstudy();
    let config = RemlConfig {
        max_iter: 1,
        ..RemlConfig::default()
    };
    let report = fit_reml(&frame, &config).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 1);
    assert!(report.estimates.validate().is_ok());
}
