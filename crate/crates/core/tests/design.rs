mod common;

use common::*;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use vardecomp_core::{
    attribution_table, build_model_frame, compute_moments, decompose, fit, parse_formula, Column,
    Dataset, FitResult, InferenceConfig, ModelFrame, RemlConfig,
};

fn sleep_columns() -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let mut reaction = Vec::new();
    let mut days = Vec::new();
    let mut subject = Vec::new();
    for line in SLEEPSTUDY_CSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        reaction.push(f[0].trim().parse().unwrap());
        days.push(f[1].trim().parse().unwrap());
        subject.push(f[2].trim().to_string());
    }
    (reaction, days, subject)
}

fn frame_from(order: &[usize], formula: &str) -> ModelFrame {
    let (reaction, days, subject) = sleep_columns();
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let subj: Vec<&str> = order.iter().map(|&i| subject[i].as_str()).collect();
    let data = Dataset::new(vec![
        ("Reaction".into(), Column::Numeric(pick(&reaction))),
        ("Days".into(), Column::Numeric(pick(&days))),
        ("Subject".into(), Column::categorical(&subj)),
    ])
    .unwrap();
    build_model_frame(&data, &parse_formula(formula).unwrap().ast).unwrap()
}

fn scalars(frame: &ModelFrame, result: &FitResult) -> Vec<(String, f64)> {
    let m = compute_moments(frame);
    let d = decompose(result, &m);
    let mut out = vec![
        ("mu".into(), result.mu_hat),
        ("sigma_eps2".into(), result.vc.sigma_eps2),
        ("s_x2".into(), d.s_x2),
        ("s_z2_pop".into(), d.s_z2_pop),
        ("s_z2_data".into(), d.s_z2_data),
        ("s_xz2".into(), d.s_xz2),
        ("r2".into(), d.r2),
        ("r2_pop".into(), d.r2_pop),
        ("r2_marginal".into(), d.r2_marginal_naka),
        ("r2_conditional".into(), d.r2_conditional_naka),
    ];
    for (j, b) in result.beta_hat.iter().enumerate() {
        out.push((format!("beta{j}"), *b));
        out.push((format!("var_beta{j}"), result.cov_beta[(j, j)]));
    }
    for (i, s) in result.vc.sigma_u2.iter().enumerate() {
        out.push((format!("sigma_u2_{i}"), *s));
    }
    for row in attribution_table(result, &m).rows {
        out.push((format!("{}:{}", row.kind.as_str(), row.label), row.value));
    }
    out
}

#[test]
fn row_permutation_leaves_fit_unchanged() {
    let formula = "Reaction ~ Days + (Days || Subject)";
    let n = 180;
    let base_order: Vec<usize> = (0..n).collect();
    let base = frame_from(&base_order, formula);
    let base_fit = fit(&base, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
    let want = scalars(&base, &base_fit);
    let y2 = base.sample_variance_y();

    let mut rng = rng(71);
    for _ in 0..3 {
        let mut order = base_order.clone();
        order.shuffle(&mut rng);
        let frame = frame_from(&order, formula);

        // Rows move together; Z columns follow the new first-appearance order.
        for (new, &old) in order.iter().enumerate() {
            assert_eq!(frame.y()[new], base.y()[old]);
            assert_eq!(frame.x()[(new, 0)], base.x()[(old, 0)]);
            assert_eq!(frame.z().row(new).sum(), base.z().row(old).sum());
        }

        let result = fit(&frame, &RemlConfig::default(), &InferenceConfig::default()).unwrap();
        assert!(result.converged());
        let got = scalars(&frame, &result);
        assert_eq!(got.len(), want.len());
        for (name, w) in &want {
            let g = got.iter().find(|(l, _)| l == name).unwrap().1;
            // Variance-unit quantities near zero are judged against σ̂²_y.
            let floor = if name.starts_with("beta") || name == "mu" || name.starts_with("r2") { 0.0 } else { y2 };
            assert!((g - w).abs() <= 1e-10 * w.abs().max(floor), "{name}: {g} vs {w}");
        }
    }
}

#[test]
fn formula_frame_matches_hand_built_design() {
    let frame = sleepstudy();
    let (_, days, subject) = sleep_columns();
    let mut levels: Vec<&str> = Vec::new();
    for s in &subject {
        if !levels.contains(&s.as_str()) {
            levels.push(s);
        }
    }
    let n = days.len();
    let intercept = DMatrix::from_fn(n, levels.len(), |i, g| {
        if subject[i] == levels[g] { 1.0 } else { 0.0 }
    });
    let slope = DMatrix::from_fn(n, levels.len(), |i, g| intercept[(i, g)] * days[i]);
    assert_eq!(frame.n(), 180);
    assert_eq!((frame.k(), frame.r(), frame.p()), (1, 2, 36));
    assert_eq!(frame.z_block(0).into_owned(), intercept);
    assert_eq!(frame.z_block(1).into_owned(), slope);
    assert_eq!(frame.x().column(0).iter().copied().collect::<Vec<_>>(), days);
    assert_eq!(frame.x_labels(), ["Days"]);
    assert_eq!(frame.blocks()[0].column_labels[0], format!("Subject={}", levels[0]));
}
