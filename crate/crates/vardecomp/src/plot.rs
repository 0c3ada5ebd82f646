//! SVG bar chart of decomposition shares.

use std::fmt::Write as _;

use crate::report::Report;

const WIDTH: f64 = 720.0;
const LABEL_W: f64 = 260.0;
const ROW_H: f64 = 26.0;
const MARGIN: f64 = 20.0;

struct Bar {
    label: String,
    share: f64,
    ci: Option<(f64, f64)>,
    color: &'static str,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bars(report: &Report) -> Vec<Bar> {
    let ci = |key: String| {
        report
            .bootstrap
            .as_ref()
            .and_then(|b| b.intervals.iter().find(|i| i.label == key))
            .map(|i| (i.lower, i.upper))
    };
    let mut out = Vec::new();
    for row in &report.partials {
        let (label, color) = match row.kind.as_str() {
            "fixed" => (format!("{} (fixed)", row.label), "#4878a8"),
            "random-population" => (format!("{} (population)", row.label), "#6aa84f"),
            "random-data" => (format!("{} (data-specific)", row.label), "#a8d08d"),
            _ => continue,
        };
        out.push(Bar {
            ci: ci(format!("{}:{}", row.kind, row.label)),
            label,
            share: row.share,
            color,
        });
    }
    let d = &report.decomposition;
    if report.model.k > 0 && report.model.r > 0 {
        out.push(Bar {
            label: "Cross term X x Z".into(),
            share: d.shares.cross,
            ci: ci("total:S_XxZ".into()),
            color: "#e69138",
        });
    }
    out.push(Bar {
        label: "Residual".into(),
        share: d.shares.residual,
        ci: ci("total:residual".into()),
        color: "#999999",
    });
    out
}

/// Horizontal bars in percent of the response variance, with optional
/// bootstrap whiskers. Negative shares extend left of the zero line.
pub fn render_svg(report: &Report) -> String {
    let bars = bars(report);
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for b in &bars {
        lo = lo.min(b.share);
        hi = hi.max(b.share);
        if let Some((l, u)) = b.ci {
            lo = lo.min(l);
            hi = hi.max(u);
        }
    }
    if hi - lo <= 0.0 {
        hi = 1.0;
    }
    let plot_w = WIDTH - LABEL_W - 2.0 * MARGIN;
    let x = |v: f64| LABEL_W + MARGIN + (v - lo) / (hi - lo) * plot_w;
    let height = 2.0 * MARGIN + 30.0 + ROW_H * bars.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.1}" font-size="14">Share of response variance (%): {}</text>"#,
        MARGIN + 4.0,
        escape(&report.model.formula)
    );
    let top = MARGIN + 20.0;
    for (i, b) in bars.iter().enumerate() {
        let y = top + ROW_H * i as f64;
        let (x0, x1) = (x(0.0_f64.min(b.share)), x(0.0_f64.max(b.share)));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LABEL_W + MARGIN - 6.0,
            y + ROW_H * 0.6,
            escape(&b.label)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{:.2}%</title></rect>"#,
            y + 4.0,
            (x1 - x0).max(0.5),
            ROW_H - 8.0,
            b.color,
            100.0 * b.share
        );
        if let Some((l, u)) = b.ci {
            let ym = y + ROW_H / 2.0;
            let _ = writeln!(
                s,
                r#"<path d="M{:.1},{ym:.1}H{:.1}M{:.1},{:.1}V{:.1}M{:.1},{:.1}V{:.1}" stroke="black" fill="none"/>"#,
                x(l),
                x(u),
                x(l),
                ym - 5.0,
                ym + 5.0,
                x(u),
                ym - 5.0,
                ym + 5.0
            );
        }
    }
    let bottom = top + ROW_H * bars.len() as f64;
    let _ = writeln!(
        s,
        r##"<line x1="{0:.1}" y1="{top:.1}" x2="{0:.1}" y2="{bottom:.1}" stroke="#333"/>"##,
        x(0.0)
    );
    for v in [lo, 0.0, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            x(v),
            bottom + 16.0,
            100.0 * v
        );
    }
    s.push_str("</svg>\n");
    s
}
