//! SVG line charts of a scenario report.

use std::fmt::Write;

use crate::harness::ScenarioReport;

const W: f64 = 640.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return None;
    }
    // Flat ranges still need some height to draw into.
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        let m = y0.abs().max(1.0) * 0.05;
        y0 -= m;
        y1 += m;
    }
    Some((x0, x1, y0, y1))
}

/// One chart as an SVG `<g>` placed at vertical offset `top`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], top: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<g transform="translate(0,{top})">"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (px0, px1, py0, py1) = (PAD, W - PAD / 2.0, H - PAD, PAD / 1.5);
    let _ = writeln!(
        s,
        r##"<rect x="{px0}" y="{py1}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        px1 - px0,
        py0 - py1
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
        (px0 + px1) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{0}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {0})">{1}</text>"#,
        (py0 + py1) / 2.0,
        escape(y_label)
    );
    let Some((x0, x1, y0, y1)) = bounds(series) else {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">no data</text></g>"#,
            W / 2.0,
            H / 2.0
        );
        return s;
    };
    let sx = |x: f64| px0 + (x - x0) / (x1 - x0) * (px1 - px0);
    let sy = |y: f64| py0 - (y - y0) / (y1 - y0) * (py0 - py1);
    for (v, anchor, x, y) in [(x0, "start", px0, py0 + 14.0), (x1, "end", px1, py0 + 14.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{}</text>"#,
            tick(v)
        );
    }
    for (v, y) in [(y0, py0), (y1, py1 + 8.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{}</text>"#,
            px0 - 4.0,
            tick(v)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = py1 + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#,
            px0 + 8.0,
            escape(&ser.label)
        );
    }
    s.push_str("</g>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{:.2e}", v)
    } else {
        format!("{:.3}", v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scale traces, trajectory errors by stage and the map accuracy CDF.
pub fn report_svg(report: &ScenarioReport) -> String {
    let scale: Vec<Series> = report
        .agents
        .iter()
        .map(|a| Series {
            label: format!("agent {}", a.agent),
            points: a
                .scale_trace
                .iter()
                .map(|p| (p.samples as f64, p.scale / a.true_scale))
                .collect(),
        })
        .collect();
    let stages: Vec<Series> = report
        .agents
        .iter()
        .map(|a| {
            let e = &a.ate;
            let vals = [e.vo_similarity, e.gnss, e.cluster_prior, e.cluster_refined];
            Series {
                label: format!("agent {}", a.agent),
                points: vals
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.map(|v| (i as f64, v)))
                    .collect(),
            }
        })
        .collect();
    let cdf: Vec<Series> = report
        .fusion
        .accuracy
        .iter()
        .map(|acc| Series {
            label: "fused map".into(),
            points: acc
                .thresholds_m
                .iter()
                .copied()
                .zip(acc.fractions.iter().copied())
                .collect(),
        })
        .collect();
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"#,
        3.0 * H
    );
    s.push('\n');
    s.push_str(&line_chart(
        "Scale estimate / true scale",
        "aligned samples",
        "ratio",
        &scale,
        0.0,
    ));
    s.push_str(&line_chart(
        "ATE by stage (0 VO, 1 GNSS, 2 prior core, 3 refined core)",
        "stage",
        "ATE (m)",
        &stages,
        H,
    ));
    s.push_str(&line_chart(
        "Map accuracy CDF",
        "distance (m)",
        "fraction",
        &cdf,
        2.0 * H,
    ));
    s.push_str("</svg>\n");
    s
}
