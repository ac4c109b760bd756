//! Standalone SVG charts. Output depends only on the input data, so the
//! same records always render to the same bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::runner::{SweepResult, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log2,
    Log10,
}

impl Scale {
    fn forward(self, v: f64) -> Option<f64> {
        let out = match self {
            Scale::Linear => v,
            Scale::Log2 if v > 0.0 => v.log2(),
            Scale::Log10 if v > 0.0 => v.log10(),
            _ => return None,
        };
        out.is_finite().then_some(out)
    }

    /// Tick positions in transformed coordinates, with labels.
    fn ticks(self, lo: f64, hi: f64) -> Vec<(f64, String)> {
        match self {
            Scale::Log2 | Scale::Log10 => {
                let base = if self == Scale::Log2 { "2" } else { "10" };
                let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
                let stride = ((b - a) / 8 + 1).max(1);
                (a..=b).filter(|k| k.rem_euclid(stride) == 0).map(|k| (k as f64, format!("{base}^{k}"))).collect()
            }
            Scale::Linear => {
                let raw = (hi - lo) / 5.0;
                let mag = 10f64.powf(raw.log10().floor());
                let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(mag * 10.0);
                let first = (lo / step).ceil() as i64;
                let last = (hi / step).floor() as i64;
                (first..=last).map(|i| (i as f64 * step, trim_number(i as f64 * step))).collect()
            }
        }
    }
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
    pub markers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub series: Vec<Series>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 46.0;

pub const COLOR_A: &str = "#1f77b4";
pub const COLOR_B: &str = "#d62728";
const COLOR_REF: &str = "#7f7f7f";

fn scheme_color(s: InitScheme) -> &'static str {
    match s {
        InitScheme::InitA => COLOR_A,
        InitScheme::InitB => COLOR_B,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders charts side by side in a single document.
pub fn render(charts: &[Chart]) -> String {
    let width = PANEL_W * charts.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r##"<rect width="{width}" height="{PANEL_H}" fill="#ffffff"/>"##);
    for (i, chart) in charts.iter().enumerate() {
        render_panel(&mut out, chart, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

fn render_panel(out: &mut String, chart: &Chart, x0: f64) {
    let transformed: Vec<Vec<Option<(f64, f64)>>> = chart
        .series
        .iter()
        .map(|s| s.points.iter().map(|&(x, y)| chart.x_scale.forward(x).zip(chart.y_scale.forward(y))).collect())
        .collect();
    let all: Vec<(f64, f64)> = transformed.iter().flatten().flatten().copied().collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = (hi - lo) * 0.05;
            (lo - pad, hi + pad)
        }
    };
    let (xlo, xhi) = bounds(|p| p.0);
    let (ylo, yhi) = bounds(|p| p.1);
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| x0 + MARGIN_L + (x - xlo) / (xhi - xlo) * plot_w;
    let py = |y: f64| MARGIN_T + (yhi - y) / (yhi - ylo) * plot_h;

    let _ = writeln!(out, r#"<g>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        x0 + MARGIN_L + plot_w / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{MARGIN_T:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#000000"/>"##,
        x0 + MARGIN_L
    );
    for (t, label) in chart.x_scale.ticks(xlo, xhi) {
        let x = px(t);
        let yb = MARGIN_T + plot_h;
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{yb:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/>"##, yb + 4.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, yb + 16.0);
    }
    for (t, label) in chart.y_scale.ticks(ylo, yhi) {
        let y = py(t);
        let xl = x0 + MARGIN_L;
        let _ = writeln!(out, r##"<line x1="{:.2}" y1="{y:.2}" x2="{xl:.2}" y2="{y:.2}" stroke="#000000"/>"##, xl - 4.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, xl - 6.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        x0 + MARGIN_L + plot_w / 2.0,
        PANEL_H - 8.0,
        escape(&chart.x_label)
    );
    let (lx, ly) = (x0 + 14.0, MARGIN_T + plot_h / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
        escape(&chart.y_label)
    );

    for (series, pts) in chart.series.iter().zip(&transformed) {
        let dash = if series.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        // a missing point breaks the line
        for run in pts.split(|p| p.is_none()).filter(|r| r.len() > 1) {
            let coords: Vec<String> =
                run.iter().flatten().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                coords.join(" "),
                series.color
            );
        }
        if series.markers {
            for &(x, y) in pts.iter().flatten() {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), series.color);
            }
        }
    }

    for (i, series) in chart.series.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 14.0 * i as f64;
        let x = x0 + MARGIN_L + 8.0;
        let dash = if series.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"{dash}/>"#,
            y - 4.0,
            x + 18.0,
            y - 4.0,
            series.color
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 22.0, escape(&series.label));
    }
    let _ = writeln!(out, "</g>");
}

fn available_widths(result: &SweepResult) -> Vec<usize> {
    let mut w: Vec<usize> = result.records.iter().map(|r| r.width).collect();
    w.sort_unstable();
    w.dedup();
    w
}

/// Optimal learning rate against width for both schemes, with `n^-1` and
/// `n^-1/2` reference lines through the Init B and Init A optima.
pub fn eta_star_chart(result: &SweepResult) -> Result<String> {
    let mut series = Vec::new();
    let mut anchors = Vec::new();
    for scheme in InitScheme::BOTH {
        let points: Vec<(f64, f64)> = result
            .optima
            .iter()
            .filter(|o| o.scheme == scheme)
            .filter_map(|o| o.lr_star.map(|lr| (o.width as f64, lr)))
            .collect();
        if points.is_empty() {
            continue;
        }
        anchors.push((scheme, points.clone()));
        series.push(Series {
            label: format!("Init {}", scheme.label()),
            points,
            color: scheme_color(scheme),
            dashed: false,
            markers: true,
        });
    }
    if series.is_empty() {
        return Err(Error::Invalid(format!(
            "no optimal learning rates to plot; available widths: {:?}",
            available_widths(result)
        )));
    }
    for (scheme, points) in anchors {
        let (slope, label) = match scheme {
            InitScheme::InitB => (-1.0, "n^-1"),
            InitScheme::InitA => (-0.5, "n^-1/2"),
        };
        // geometric-mean intercept through the scheme's own optima
        let c = (points.iter().map(|&(n, lr)| lr.log2() - slope * n.log2()).sum::<f64>() / points.len() as f64).exp2();
        series.push(Series {
            label: label.into(),
            points: points.iter().map(|&(n, _)| (n, c * n.powf(slope))).collect(),
            color: COLOR_REF,
            dashed: true,
            markers: false,
        });
    }
    Ok(render(&[Chart {
        title: "optimal learning rate".into(),
        x_label: "width n".into(),
        y_label: "lr*".into(),
        x_scale: Scale::Log2,
        y_scale: Scale::Log2,
        series,
    }]))
}

/// Seed-mean curve of `field` at the optimal lr of (width, scheme).
fn optimum_curve(
    result: &SweepResult,
    width: usize,
    scheme: InitScheme,
    field: fn(&TrialRecord) -> &Vec<f64>,
) -> Option<Vec<(f64, f64)>> {
    let lr = result.optima.iter().find(|o| o.width == width && o.scheme == scheme)?.lr_star?;
    let trials: Vec<&TrialRecord> =
        result.records.iter().filter(|r| r.width == width && r.scheme == scheme && r.lr == lr).collect();
    let first = trials.first()?;
    Some(
        first
            .steps
            .iter()
            .enumerate()
            .map(|(i, &step)| (step as f64, trials.iter().map(|t| field(t)[i]).sum::<f64>() / trials.len() as f64))
            .collect(),
    )
}

fn check_widths(result: &SweepResult, widths: &[usize]) -> Result<()> {
    let available = available_widths(result);
    match widths.iter().find(|w| !available.contains(w)) {
        _ if widths.is_empty() => Err(Error::Invalid(format!("no widths selected; available widths: {available:?}"))),
        Some(w) => Err(Error::Invalid(format!("width {w} not in records; available widths: {available:?}"))),
        None => Ok(()),
    }
}

type Field = fn(&TrialRecord) -> &Vec<f64>;

/// One panel per width: mean `‖Z_A‖` and `‖Z_B‖` over steps for both
/// schemes at their optimal learning rates.
pub fn feature_norms_chart(result: &SweepResult, widths: &[usize]) -> Result<String> {
    check_widths(result, widths)?;
    let charts: Vec<Chart> = widths
        .iter()
        .map(|&w| {
            let mut series = Vec::new();
            for scheme in InitScheme::BOTH {
                let fields: [(&str, Field, bool); 2] =
                    [("Z_A", |r| &r.mean_za, false), ("Z_B", |r| &r.mean_zb, true)];
                for (name, field, dashed) in fields {
                    if let Some(points) = optimum_curve(result, w, scheme, field) {
                        series.push(Series {
                            label: format!("|{name}| Init {}", scheme.label()),
                            points,
                            color: scheme_color(scheme),
                            dashed,
                            markers: false,
                        });
                    }
                }
            }
            Chart {
                title: format!("feature norms, n = {w}"),
                x_label: "step".into(),
                y_label: "mean norm".into(),
                x_scale: Scale::Linear,
                y_scale: Scale::Log10,
                series,
            }
        })
        .collect();
    if charts.iter().all(|c| c.series.is_empty()) {
        return Err(Error::Invalid("no stable optimum at the selected widths".into()));
    }
    Ok(render(&charts))
}

/// Train loss over steps for both schemes at their optimal learning rates.
pub fn loss_chart(result: &SweepResult, widths: &[usize]) -> Result<String> {
    check_widths(result, widths)?;
    let charts: Vec<Chart> = widths
        .iter()
        .map(|&w| Chart {
            title: format!("train loss, n = {w}"),
            x_label: "step".into(),
            y_label: "loss".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Log10,
            series: InitScheme::BOTH
                .iter()
                .filter_map(|&scheme| {
                    optimum_curve(result, w, scheme, |r| &r.train_loss).map(|points| Series {
                        label: format!("Init {}", scheme.label()),
                        points,
                        color: scheme_color(scheme),
                        dashed: false,
                        markers: false,
                    })
                })
                .collect(),
        })
        .collect();
    if charts.iter().all(|c| c.series.is_empty()) {
        return Err(Error::Invalid("no stable optimum at the selected widths".into()));
    }
    Ok(render(&charts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::compute_optima;

    fn record(width: usize, scheme: InitScheme, lr: f64, loss: f64) -> TrialRecord {
        TrialRecord {
            width,
            scheme,
            lr,
            seed: 0,
            steps: vec![0, 5, 10],
            train_loss: vec![1.0, loss * 3.0, loss],
            test_loss: vec![1.0, loss * 3.0, loss],
            mean_za: if scheme == InitScheme::InitA { vec![1.0, 2.0, 4.0] } else { vec![0.0, 0.5, 1.0] },
            mean_zb: vec![0.0, 1.0, 2.0],
            diverged: false,
            final_train_loss: loss,
            final_test_loss: loss,
        }
    }

    fn sweep() -> SweepResult {
        let mut records = Vec::new();
        for w in [128usize, 256, 512] {
            for (i, lr) in [0.001, 0.01].into_iter().enumerate() {
                records.push(record(w, InitScheme::InitA, lr, 0.1 + i as f64 * 0.01));
                records.push(record(w, InitScheme::InitB, lr, 0.2 - i as f64 * 0.01));
            }
        }
        SweepResult { optima: compute_optima(&records), records }
    }

    #[test]
    fn eta_star_has_two_series_and_two_reference_lines() {
        let svg = eta_star_chart(&sweep()).unwrap();
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches("stroke-dasharray").count(), 4);
        assert!(svg.contains(">Init A<") && svg.contains(">Init B<"));
        assert!(svg.contains(">n^-1<") && svg.contains(">n^-1/2<"));
        assert!(svg.contains(">2^7<"));
        assert_eq!(svg, eta_star_chart(&sweep()).unwrap());
    }

    #[test]
    fn feature_panels_and_errors() {
        let svg = feature_norms_chart(&sweep(), &[128, 512]).unwrap();
        assert_eq!(svg.matches("<g>").count(), 2);
        assert!(svg.contains("width=\"840\""));
        let e = feature_norms_chart(&sweep(), &[4096]).unwrap_err().to_string();
        assert!(e.contains("[128, 256, 512]"), "{e}");
        let e = eta_star_chart(&SweepResult { records: vec![], optima: vec![] }).unwrap_err().to_string();
        assert!(e.contains("available widths"), "{e}");
        assert!(loss_chart(&sweep(), &[256]).unwrap().contains("train loss, n = 256"));
    }

    #[test]
    fn log_axes_skip_zeros() {
        let svg = feature_norms_chart(&sweep(), &[128]).unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn ticks() {
        let t = Scale::Log2.ticks(6.8, 11.2);
        assert_eq!(t.iter().map(|t| t.1.as_str()).collect::<Vec<_>>(), ["2^7", "2^8", "2^9", "2^10", "2^11"]);
        let t = Scale::Linear.ticks(0.0, 500.0);
        assert_eq!(t.iter().map(|t| t.1.as_str()).collect::<Vec<_>>(), ["0", "100", "200", "300", "400", "500"]);
    }
}
