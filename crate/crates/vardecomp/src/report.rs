//! Serializable report and its text and CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use vardecomp_core::AttributionKind;

use crate::analysis::Analysis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelInfo,
    pub variance_components: VarianceComponentsInfo,
    pub fixed_effects: Vec<FixedEffect>,
    pub decomposition: DecompositionInfo,
    pub partials: Vec<PartialRow>,
    pub r_squared: RSquared,
    pub bootstrap: Option<BootstrapInfo>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub formula: String,
    pub response: String,
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub p: usize,
    pub fixed_effects: Vec<String>,
    pub random_blocks: Vec<BlockInfo>,
    pub scale_y: bool,
    /// The response was divided by this factor before fitting.
    pub y_scale_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub label: String,
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponentsInfo {
    pub sigma_eps2: f64,
    pub random: Vec<ComponentInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub label: String,
    pub sigma_u2: f64,
    /// Variance ratio σ²_u / σ²_ε.
    pub gamma: f64,
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    /// Two-sided p-value from the standard normal reference.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionInfo {
    pub sigma_y2: f64,
    pub s_x2: f64,
    pub s_z2_population: f64,
    pub s_z2_data: f64,
    pub s_xz2: f64,
    pub sigma_eps2: f64,
    pub shares: Shares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub fixed: f64,
    pub random_population: f64,
    pub random_data: f64,
    pub cross: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRow {
    pub label: String,
    pub kind: String,
    pub value: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub r2: f64,
    pub r2_pop: f64,
    pub r2_marginal_nakagawa: f64,
    pub r2_conditional_nakagawa: f64,
    pub sigma_f2: f64,
    pub sigma_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    pub n_replicates: usize,
    pub n_failed: usize,
    pub level: f64,
    pub seed: u64,
    pub workers: usize,
    pub intervals: Vec<IntervalInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalInfo {
    pub label: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub newton_steps: usize,
    pub residual_reml_eqs: Vec<f64>,
    pub boundary_flags: Vec<bool>,
    pub restricted_loglik: f64,
    pub identity_residual: f64,
    pub warnings: Vec<String>,
}

/// Two-sided normal tail probability of `|z|`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

impl Report {
    pub fn from_analysis(a: &Analysis) -> Report {
        let frame = &a.frame;
        let fit = &a.fit;
        let d = &a.decomposition;
        let reml = fit.reml_report.as_ref();
        let boundary = reml.map_or_else(|| vec![false; frame.r()], |r| r.boundary_flags.clone());

        let model = ModelInfo {
            formula: a.formula_text.clone(),
            response: frame.response_name().to_string(),
            n: frame.n(),
            k: frame.k(),
            r: frame.r(),
            p: frame.p(),
            fixed_effects: frame.x_labels().to_vec(),
            random_blocks: frame
                .blocks()
                .iter()
                .map(|b| BlockInfo {
                    label: b.label.clone(),
                    columns: b.size(),
                })
                .collect(),
            scale_y: a.y_scale != 1.0,
            y_scale_factor: a.y_scale,
        };

        let variance_components = VarianceComponentsInfo {
            sigma_eps2: fit.vc.sigma_eps2,
            random: frame
                .blocks()
                .iter()
                .enumerate()
                .map(|(i, b)| ComponentInfo {
                    label: b.label.clone(),
                    sigma_u2: fit.vc.sigma_u2[i],
                    gamma: fit.vc.sigma_u2[i] / fit.vc.sigma_eps2,
                    boundary: boundary[i],
                })
                .collect(),
        };

        let mut fixed_effects = vec![fixed_row("(Intercept)", fit.mu_hat, fit.se_mu())];
        let se = fit.se_beta();
        for (j, label) in fit.fixed_labels.iter().enumerate() {
            fixed_effects.push(fixed_row(label, fit.beta_hat[j], se[j]));
        }

        let y2 = d.sigma_y2;
        let decomposition = DecompositionInfo {
            sigma_y2: y2,
            s_x2: d.s_x2,
            s_z2_population: d.s_z2_pop,
            s_z2_data: d.s_z2_data,
            s_xz2: d.s_xz2,
            sigma_eps2: d.sigma_eps2,
            shares: Shares {
                fixed: d.s_x2 / y2,
                random_population: d.s_z2_pop / y2,
                random_data: d.s_z2_data / y2,
                cross: d.s_xz2 / y2,
                residual: d.sigma_eps2 / y2,
            },
        };

        let partials = a
            .table
            .rows
            .iter()
            .map(|row| PartialRow {
                label: row.label.clone(),
                kind: row.kind.as_str().to_string(),
                value: row.value,
                share: a.table.share(row),
            })
            .collect();

        let r_squared = RSquared {
            r2: d.r2,
            r2_pop: d.r2_pop,
            r2_marginal_nakagawa: d.r2_marginal_naka,
            r2_conditional_nakagawa: d.r2_conditional_naka,
            sigma_f2: d.sigma_f2,
            sigma_l2: d.sigma_l2,
        };

        let bootstrap = a.bootstrap.as_ref().map(|b| BootstrapInfo {
            n_replicates: b.n_replicates,
            n_failed: b.n_failed,
            level: b.level,
            seed: b.seed,
            workers: a.workers.unwrap_or(0),
            intervals: b
                .per_row
                .iter()
                .map(|i| IntervalInfo {
                    label: i.label.clone(),
                    point: i.point,
                    lower: i.lower,
                    upper: i.upper,
                })
                .collect(),
        });

        let diagnostics = Diagnostics {
            converged: fit.converged(),
            iterations: reml.map_or(0, |r| r.iterations),
            newton_steps: reml.map_or(0, |r| r.newton_steps),
            residual_reml_eqs: reml.map_or_else(Vec::new, |r| r.residual_reml_eqs.clone()),
            boundary_flags: boundary,
            restricted_loglik: reml.map_or(f64::NAN, |r| r.restricted_loglik),
            identity_residual: d.identity_residual(),
            warnings: a.warnings.clone(),
        };

        Report {
            model,
            variance_components,
            fixed_effects,
            decomposition,
            partials,
            r_squared,
            bootstrap,
            diagnostics,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Report> {
        serde_json::from_str(text)
    }

    fn interval(&self, key: &str) -> Option<&IntervalInfo> {
        self.bootstrap
            .as_ref()
            .and_then(|b| b.intervals.iter().find(|i| i.label == key))
    }

    fn partials_of(&self, kind: AttributionKind) -> impl Iterator<Item = &PartialRow> {
        self.partials.iter().filter(move |r| r.kind == kind.as_str())
    }

    /// Human-readable report laid out like a regression summary table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let _ = writeln!(out, "Linear mixed model fit by REML");
        let _ = writeln!(out, "Formula: {}", m.formula);
        let _ = writeln!(
            out,
            "Observations: {}   fixed covariates: {}   random blocks: {} ({} columns)",
            m.n, m.k, m.r, m.p
        );
        if m.scale_y {
            let _ = writeln!(
                out,
                "Response divided by its sample SD ({}) before fitting",
                fmt_num(m.y_scale_factor)
            );
        }

        let _ = writeln!(out, "\nVariance components");
        let _ = writeln!(out, "  {:<28} {:>14} {:>12}", "block", "variance", "ratio");
        for c in &self.variance_components.random {
            let flag = if c.boundary { "  (boundary)" } else { "" };
            let _ = writeln!(
                out,
                "  {:<28} {:>14} {:>12}{}",
                c.label,
                fmt_num(c.sigma_u2),
                fmt_num(c.gamma),
                flag
            );
        }
        let _ = writeln!(
            out,
            "  {:<28} {:>14}",
            "Residual",
            fmt_num(self.variance_components.sigma_eps2)
        );

        let _ = writeln!(out, "\nFixed effects (p-values: z-approx)");
        let _ = writeln!(
            out,
            "  {:<20} {:>12} {:>12} {:>9} {:>10}",
            "term", "Estimate", "Std. Error", "z value", "Pr(>|z|)"
        );
        for f in &self.fixed_effects {
            let _ = writeln!(
                out,
                "  {:<20} {:>12} {:>12} {:>9.3} {:>10}",
                f.label,
                fmt_num(f.estimate),
                fmt_num(f.std_error),
                f.z_value,
                fmt_p(f.p_value)
            );
        }

        self.render_decomposition(&mut out);

        let r = &self.r_squared;
        let _ = writeln!(out, "\nCoefficients of determination");
        let rows = [
            ("R2 (mixed model)", r.r2, "r2"),
            ("R2 population", r.r2_pop, "r2_pop"),
            ("R2 marginal (Nakagawa)", r.r2_marginal_nakagawa, "r2_marginal_naka"),
            ("R2 conditional (Nakagawa)", r.r2_conditional_nakagawa, "r2_conditional_naka"),
        ];
        for (name, value, key) in rows {
            let ci = self
                .interval(key)
                .map(|i| format!("   [{:.4}, {:.4}]", i.lower, i.upper))
                .unwrap_or_default();
            let _ = writeln!(out, "  {name:<28} {value:>10.4}{ci}");
        }

        let dg = &self.diagnostics;
        let _ = writeln!(out, "\nDiagnostics");
        let _ = writeln!(
            out,
            "  converged: {} ({} iterations, {} Newton steps)",
            if dg.converged { "yes" } else { "NO" },
            dg.iterations,
            dg.newton_steps
        );
        let _ = writeln!(out, "  restricted log-likelihood: {:.6}", dg.restricted_loglik);
        let residuals: Vec<String> = dg
            .residual_reml_eqs
            .iter()
            .map(|v| format!("{v:.2e}"))
            .collect();
        let _ = writeln!(out, "  REML equation residuals: [{}]", residuals.join(", "));
        let pinned: Vec<&str> = self
            .variance_components
            .random
            .iter()
            .filter(|c| c.boundary)
            .map(|c| c.label.as_str())
            .collect();
        let _ = writeln!(
            out,
            "  boundary components: {}",
            if pinned.is_empty() { "none".to_string() } else { pinned.join(", ") }
        );
        let _ = writeln!(out, "  decomposition identity residual: {:.2e}", dg.identity_residual);
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(
                out,
                "  bootstrap: {} replicates, {} failed, seed {}, {:.0}% percentile intervals",
                b.n_replicates,
                b.n_failed,
                b.seed,
                100.0 * b.level
            );
        }
        for w in &dg.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
        out
    }

    fn render_decomposition(&self, out: &mut String) {
        let d = &self.decomposition;
        let ci_header = self
            .bootstrap
            .as_ref()
            .map(|b| {
                let a = 50.0 * (1.0 - b.level);
                format!(" {:>8} {:>8}", format!("{a:.1}%"), format!("{:.1}%", 100.0 - a))
            })
            .unwrap_or_default();
        let _ = writeln!(out, "\nVariance explained (sample variance of response = {})", fmt_num(d.sigma_y2));
        let _ = writeln!(out, "  {:<34} {:>14} {:>8}{}", "source", "variance", "%", ci_header);

        let line = |out: &mut String, name: String, value: f64, key: Option<String>| {
            let ci = match key.as_deref().and_then(|k| self.interval(k)) {
                Some(i) => format!(" {:>8.1} {:>8.1}", 100.0 * i.lower, 100.0 * i.upper),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "  {:<34} {:>14} {:>8.2}{}",
                name,
                fmt_num(value),
                100.0 * value / d.sigma_y2,
                ci
            );
        };
        let key = |kind: AttributionKind, label: &str| Some(format!("{}:{}", kind.as_str(), label));

        for row in self.partials_of(AttributionKind::Fixed) {
            line(out, format!("{} (fixed)", row.label), row.value, key(AttributionKind::Fixed, &row.label));
        }
        for block in &self.model.random_blocks {
            let _ = writeln!(out, "  {} (random)", block.label);
            if let Some(row) = self.partials_of(AttributionKind::RandomPopulation).find(|r| r.label == block.label) {
                line(out, "    population".into(), row.value, key(AttributionKind::RandomPopulation, &row.label));
            }
            if let Some(row) = self.partials_of(AttributionKind::RandomData).find(|r| r.label == block.label) {
                line(out, "    data-specific".into(), row.value, key(AttributionKind::RandomData, &row.label));
            }
        }
        if self.model.k > 0 && self.model.r > 0 {
            line(out, "Cross term X x Z".into(), d.s_xz2, Some("total:S_XxZ".into()));
            for row in self.partials_of(AttributionKind::CrossFixed) {
                line(out, format!("    via {}", row.label), row.value, key(AttributionKind::CrossFixed, &row.label));
            }
            for row in self.partials_of(AttributionKind::CrossRandom) {
                line(out, format!("    via {}", row.label), row.value, key(AttributionKind::CrossRandom, &row.label));
            }
        }
        if self.model.r > 0 {
            line(
                out,
                "Data-specific and cross terms".into(),
                d.s_z2_data + d.s_xz2,
                Some("total:data_and_cross".into()),
            );
        }
        line(out, "Residual".into(), d.sigma_eps2, Some("total:residual".into()));
        let total = d.s_x2 + d.s_z2_population + d.s_z2_data + d.s_xz2 + d.sigma_eps2;
        line(out, "Total".into(), total, None);
    }

    /// Long-format CSV of the decomposition, aggregate totals and R² measures.
    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["section", "label", "kind", "value", "share", "ci_lower", "ci_upper"])
            .expect("in-memory write");
        let mut push = |section: &str, label: &str, kind: &str, value: f64, share: f64, key: Option<String>| {
            let (lo, hi) = key
                .as_deref()
                .and_then(|k| self.interval(k))
                .map_or((String::new(), String::new()), |i| (i.lower.to_string(), i.upper.to_string()));
            w.write_record([
                section,
                label,
                kind,
                &value.to_string(),
                &share.to_string(),
                &lo,
                &hi,
            ])
            .expect("in-memory write");
        };
        for row in &self.partials {
            let key = (row.kind != "residual").then(|| format!("{}:{}", row.kind, row.label));
            let key = key.or_else(|| Some("total:residual".into()));
            push("partial", &row.label, &row.kind, row.value, row.share, key);
        }
        let d = &self.decomposition;
        let y2 = d.sigma_y2;
        for (label, value, key) in [
            ("S_X", d.s_x2, "total:S_X"),
            ("S_Z_population", d.s_z2_population, "total:S_Z_population"),
            ("S_Z_data", d.s_z2_data, "total:S_Z_data"),
            ("S_XxZ", d.s_xz2, "total:S_XxZ"),
            ("data_and_cross", d.s_z2_data + d.s_xz2, "total:data_and_cross"),
            ("residual", d.sigma_eps2, "total:residual"),
        ] {
            push("total", label, "total", value, value / y2, Some(key.into()));
        }
        push("total", "sigma_y2", "total", y2, 1.0, None);
        let r = &self.r_squared;
        for (label, value, key) in [
            ("r2", r.r2, "r2"),
            ("r2_pop", r.r2_pop, "r2_pop"),
            ("r2_marginal_nakagawa", r.r2_marginal_nakagawa, "r2_marginal_naka"),
            ("r2_conditional_nakagawa", r.r2_conditional_nakagawa, "r2_conditional_naka"),
        ] {
            push("r_squared", label, "r_squared", value, value, Some(key.into()));
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }
}

fn fixed_row(label: &str, estimate: f64, std_error: f64) -> FixedEffect {
    let z_value = estimate / std_error;
    FixedEffect {
        label: label.to_string(),
        estimate,
        std_error,
        z_value,
        p_value: normal_two_sided_p(z_value),
    }
}

fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e7).contains(&a) {
        format!("{v:.4}")
    } else {
        format!("{v:.4e}")
    }
}

fn fmt_p(p: f64) -> String {
    if p < 2.2e-16 {
        "<2.2e-16".into()
    } else if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_p_values() {
        assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-12);
        assert_eq!(normal_two_sided_p(0.0), 1.0);
        assert!((normal_two_sided_p(-1.0) - 0.3173105078629141).abs() < 1e-14);
    }

    #[test]
    fn number_formats() {
        assert_eq!(fmt_p(1e-20), "<2.2e-16");
        assert_eq!(fmt_p(0.5), "0.5000");
        assert_eq!(fmt_num(0.0), "0.0000");
        assert_eq!(fmt_num(1.5e-6), "1.5000e-6");
    }
}
