//! Re-checks a serialized report using only the numbers it contains.

use crate::report::Report;

/// Tolerance of the decomposition identity, relative to the response variance.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Tolerance of partial sums and derived shares, relative to the response variance.
pub const PARTIAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Relative deviation found.
    pub deviation: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.deviation <= self.tolerance
    }
}

fn check(name: impl Into<String>, deviation: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        deviation: if deviation.is_nan() { f64::INFINITY } else { deviation },
        tolerance,
    }
}

/// Every identity the report must satisfy.
pub fn validate_report(report: &Report) -> Vec<Check> {
    let d = &report.decomposition;
    let y2 = d.sigma_y2;
    let rel = |a: f64, b: f64| (a - b).abs() / y2.abs();
    let mut checks = Vec::new();

    let total = d.s_x2 + d.s_z2_population + d.s_z2_data + d.s_xz2 + d.sigma_eps2;
    checks.push(check("decomposition identity", rel(total, y2), IDENTITY_TOL));

    let sum_kind = |kind: &str| -> (usize, f64) {
        report
            .partials
            .iter()
            .filter(|r| r.kind == kind)
            .fold((0, 0.0), |(n, s), r| (n + 1, s + r.value))
    };
    let k = report.model.k;
    let r = report.model.r;
    for (kind, target, expected_rows) in [
        ("fixed", d.s_x2, k),
        ("random-population", d.s_z2_population, r),
        ("random-data", d.s_z2_data, r),
        ("residual", d.sigma_eps2, 1),
    ] {
        let (rows, sum) = sum_kind(kind);
        if rows == 0 && expected_rows == 0 {
            checks.push(check(format!("{kind} total is zero"), rel(target, 0.0), PARTIAL_TOL));
            continue;
        }
        let count_dev = if rows == expected_rows { 0.0 } else { f64::INFINITY };
        checks.push(check(format!("{kind} row count"), count_dev, 0.0));
        checks.push(check(format!("{kind} rows sum to total"), rel(sum, target), PARTIAL_TOL));
    }

    // The cross term is split evenly between covariate rows and block rows.
    let cross_rows = if k > 0 && r > 0 { (k, r) } else { (0, 0) };
    let (nf, sf) = sum_kind("cross-fixed");
    let (nr, sr) = sum_kind("cross-random");
    let count_dev = if (nf, nr) == cross_rows { 0.0 } else { f64::INFINITY };
    checks.push(check("cross row count", count_dev, 0.0));
    checks.push(check("cross rows sum to total", rel(sf + sr, d.s_xz2), PARTIAL_TOL));
    checks.push(check("cross halves agree", rel(sf, sr), PARTIAL_TOL));

    let share_dev = report
        .partials
        .iter()
        .map(|p| (p.share - p.value / y2).abs())
        .fold(0.0, f64::max);
    checks.push(check("partial shares", share_dev, PARTIAL_TOL));
    let s = &d.shares;
    let agg_dev = [
        (s.fixed, d.s_x2),
        (s.random_population, d.s_z2_population),
        (s.random_data, d.s_z2_data),
        (s.cross, d.s_xz2),
        (s.residual, d.sigma_eps2),
    ]
    .iter()
    .map(|(share, v)| (share - v / y2).abs())
    .fold(0.0, f64::max);
    checks.push(check("aggregate shares", agg_dev, PARTIAL_TOL));
    checks.push(check(
        "R2 equals one minus residual share",
        (report.r_squared.r2 - (1.0 - d.sigma_eps2 / y2)).abs(),
        PARTIAL_TOL,
    ));
    let pop = d.s_x2 + d.s_z2_population;
    checks.push(check(
        "population R2",
        (report.r_squared.r2_pop - pop / (pop + d.sigma_eps2)).abs(),
        PARTIAL_TOL,
    ));
    let vc = &report.variance_components;
    checks.push(check(
        "residual variance matches components",
        rel(vc.sigma_eps2, d.sigma_eps2),
        PARTIAL_TOL,
    ));
    let nonneg = if vc.random.iter().all(|c| c.sigma_u2 >= 0.0) && vc.sigma_eps2 > 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    checks.push(check("variance components admissible", nonneg, 0.0));

    if let Some(b) = &report.bootstrap {
        let ordered = b.intervals.iter().all(|i| i.lower <= i.upper);
        checks.push(check(
            "bootstrap intervals ordered",
            if ordered { 0.0 } else { f64::INFINITY },
            0.0,
        ));
    }
    checks
}
