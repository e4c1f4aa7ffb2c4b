//! Minimal deterministic SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::harness::{read_probes, FinetuneReport};
use crate::probes::ProbeRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    LossCurve,
    NormCurve,
    ElrCurve,
    TraceTrend,
    RiskCurve,
    Ushape,
}

impl PlotKind {
    pub const ALL: [PlotKind; 6] = [
        PlotKind::LossCurve,
        PlotKind::NormCurve,
        PlotKind::ElrCurve,
        PlotKind::TraceTrend,
        PlotKind::RiskCurve,
        PlotKind::Ushape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::LossCurve => "loss_curve",
            PlotKind::NormCurve => "norm_curve",
            PlotKind::ElrCurve => "elr_curve",
            PlotKind::TraceTrend => "trace_trend",
            PlotKind::RiskCurve => "risk_curve",
            PlotKind::Ushape => "ushape",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown plot kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub log_y: bool,
    /// Mark individual points as well as joining them.
    pub markers: bool,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

/// Render `chart`; fails if there is nothing to draw.
pub fn render_svg(chart: &Chart) -> Result<String> {
    let ty = |y: f64| if chart.log_y { y.log10() } else { y };
    let usable = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!chart.log_y || y > 0.0);
    let pts: Vec<Vec<(f64, f64)>> = chart
        .series
        .iter()
        .map(|s| s.points.iter().filter(|p| usable(p)).map(|&(x, y)| (x, ty(y))).collect())
        .collect();
    let all: Vec<(f64, f64)> = pts.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(invalid("nothing to plot: every series is empty"));
    }
    let (x0, x1) = span(
        all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(
        all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, esc(&chart.title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, tick_label(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/>"#, LEFT - 4.0);
        let label = if chart.log_y { format!("1e{yv:.2}") } else { tick_label(yv) };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 6.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0, esc(&chart.x_label));
    let y_label = if chart.log_y { format!("{} (log scale)", chart.y_label) } else { chart.y_label.clone() };
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&y_label)
    );
    for (i, (series, p)) in chart.series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if p.len() > 1 {
            let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        }
        if chart.markers || p.len() == 1 {
            for &(x, y) in p {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = TOP + 14.0 + 14.0 * i as f64;
        let lx = LEFT + pw - 150.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 24.0, esc(&series.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn record_series(records: &[ProbeRecord], label: &str, f: impl Fn(&ProbeRecord) -> Option<f64>) -> Series {
    Series {
        label: label.into(),
        points: records.iter().filter_map(|r| f(r).map(|y| (r.step as f64, y))).collect(),
    }
}

/// Chart of a probe log.
pub fn chart_from_records(records: &[ProbeRecord], kind: PlotKind) -> Result<Chart> {
    let (title, y_label, series, log_y) = match kind {
        PlotKind::LossCurve => (
            "Training loss",
            "loss",
            vec![
                record_series(records, "train loss", |r| Some(r.train_loss)),
                record_series(records, "regularized loss", |r| Some(r.reg_loss)),
            ],
            true,
        ),
        PlotKind::NormCurve => ("Parameter norm", "||w||", vec![record_series(records, "||w||", |r| Some(r.param_norm))], false),
        PlotKind::ElrCurve => ("Effective learning rate", "eta_eff", vec![record_series(records, "eta_eff", |r| r.eff_lr)], true),
        PlotKind::TraceTrend => (
            "Hessian trace",
            "Tr(H)",
            vec![record_series(records, "trace", |r| r.trace_estimate.map(|e| e.value))],
            false,
        ),
        other => return Err(invalid(format!("{} is not drawn from a probe log", other.name()))),
    };
    Ok(Chart { title: title.into(), x_label: "step".into(), y_label: y_label.into(), series, log_y, markers: false })
}

pub fn chart_from_finetune(report: &FinetuneReport) -> Chart {
    Chart {
        title: "Trace at fine-tuned iterates".into(),
        x_label: "snapshot step".into(),
        y_label: "Tr(H)".into(),
        series: vec![Series {
            label: "fine-tuned trace".into(),
            points: report.rows.iter().map(|r| (r.step as f64, r.trace.value)).collect(),
        }],
        log_y: false,
        markers: true,
    }
}

fn csv_table(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().ok_or_else(|| invalid("empty CSV"))?.split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| invalid(format!("CSV lacks column `{name}`")))
}

fn num(field: Option<&String>) -> Option<f64> {
    field.and_then(|f| f.trim().parse().ok())
}

/// Chart of a risk-curve CSV.
pub fn chart_from_risk_csv(text: &str) -> Result<Chart> {
    let (header, rows) = csv_table(text)?;
    let step = column(&header, "step")?;
    let series = ["exact_total", "bias", "variance", "empirical_mean"]
        .iter()
        .map(|name| {
            let c = column(&header, name)?;
            Ok(Series {
                label: name.replace('_', " "),
                points: rows.iter().filter_map(|r| Some((num(r.get(step))?, num(r.get(c))?))).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let series = series.into_iter().filter(|s| !s.points.is_empty()).collect();
    Ok(Chart {
        title: "Expected squared error".into(),
        x_label: "step".into(),
        y_label: "E||w - w*||^2".into(),
        series,
        log_y: true,
        markers: false,
    })
}

/// Seed-averaged terminal test metric against LR, one series per (lambda, precision).
pub fn chart_from_sweep_csv(text: &str) -> Result<Chart> {
    let (header, rows) = csv_table(text)?;
    let (lr, lam, prec, metric) = (
        column(&header, "lr")?,
        column(&header, "lambda_wd")?,
        column(&header, "precision")?,
        column(&header, "final_test_metric")?,
    );
    let mut groups: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in &rows {
        let (Some(x), Some(y)) = (num(r.get(lr)), num(r.get(metric))) else { continue };
        let key = format!("lambda={} {}", r[lam], r[prec]);
        let e = groups.entry(key).or_default().entry(x.to_bits()).or_insert((x, 0.0, 0));
        e.1 += y;
        e.2 += 1;
    }
    let series = groups
        .into_iter()
        .map(|(label, cells)| {
            let mut points: Vec<(f64, f64)> = cells.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect();
    Ok(Chart {
        title: "Terminal test metric across learning rates".into(),
        x_label: "lr".into(),
        y_label: "test metric".into(),
        series,
        log_y: false,
        markers: true,
    })
}

/// Load the chart of `kind` from `input` (a run directory, probe log, fine-tune
/// report, risk CSV or sweep CSV).
pub fn load_chart(input: &Path, kind: PlotKind) -> Result<Chart> {
    let path = if input.is_dir() {
        match kind {
            PlotKind::TraceTrend if input.join("finetune.json").exists() => input.join("finetune.json"),
            PlotKind::RiskCurve => input.join("risk.csv"),
            PlotKind::Ushape => input.join("sweep.csv"),
            _ => input.join("probes.jsonl"),
        }
    } else {
        input.to_path_buf()
    };
    match kind {
        PlotKind::RiskCurve => chart_from_risk_csv(&std::fs::read_to_string(&path)?),
        PlotKind::Ushape => chart_from_sweep_csv(&std::fs::read_to_string(&path)?),
        PlotKind::TraceTrend if path.extension().is_some_and(|e| e == "json") => {
            let report: FinetuneReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            Ok(chart_from_finetune(&report))
        }
        _ => chart_from_records(&read_probes(&path)?, kind),
    }
}

/// Render `kind` from `input` into `out`; nothing is written on failure.
pub fn plot(input: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = render_svg(&load_chart(input, kind)?)?;
    std::fs::write(out, svg)?;
    Ok(())
}
