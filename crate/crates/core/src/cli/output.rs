use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::MetricRow;

pub const CSV_HEADER: &str = "method,seed,meta_step,mean_mse,ci95,trial,wall_time_s";

/// Writes through a sibling temp file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// CSV with floats at 17 significant digits.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{},{:.16e}",
            quote(&r.method),
            r.seed,
            r.meta_step,
            r.mean_mse,
            r.ci95,
            quote(&r.trial),
            r.wall_time_s
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Mean curve per method over all its runs, with a band of the mean CI
/// half-width. The y axis is logarithmic; non-finite points are dropped.
pub fn curves_svg(rows: &[MetricRow], title: &str) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut by: BTreeMap<(&str, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.mean_mse.is_finite() && r.mean_mse > 0.0) {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
        let e = by.entry((&r.method, r.meta_step)).or_default();
        e.0 += r.mean_mse;
        e.1 += r.ci95;
        e.2 += 1;
    }
    let (w, h, pad) = (640.0, 400.0, 56.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    if by.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let points: Vec<(f64, f64, f64)> = by
        .values()
        .map(|&(m, c, n)| (m / n as f64, c / n as f64, 0.0))
        .collect();
    let lo = points
        .iter()
        .map(|p| (p.0 - p.1).max(p.0 * 0.1))
        .fold(f64::INFINITY, f64::min)
        .log10()
        .floor();
    let hi = points.iter().map(|p| p.0 + p.1).fold(0.0, f64::max).log10().ceil();
    let hi = if hi <= lo { lo + 1.0 } else { hi };
    let max_step = by.keys().map(|k| k.1).max().unwrap_or(1).max(1) as f64;
    let sx = |s: u64| pad + (w - 2.0 * pad) * s as f64 / max_step;
    let sy = |v: f64| {
        let v = v.max(10f64.powf(lo)).log10();
        h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo)
    };
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"black\" points=\"{pad},{} {pad},{} {},{}\"/>",
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    let mut decade = lo;
    while decade <= hi {
        let y = sy(10f64.powf(decade));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">1e{decade}</text>",
            pad - 4.0
        );
        decade += 1.0;
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">meta-step (max {max_step})</text>",
        w / 2.0,
        h - 16.0
    );
    for (i, method) in order.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let series: Vec<(u64, f64, f64)> = by
            .range((*method, 0)..=(*method, u64::MAX))
            .map(|(k, &(m, c, n))| (k.1, m / n as f64, c / n as f64))
            .collect();
        let upper: Vec<String> = series.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1 + p.2))).collect();
        let lower: Vec<String> = series.iter().rev().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1 - p.2))).collect();
        let _ = writeln!(
            svg,
            "<polygon fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\" points=\"{} {}\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = series.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            w - pad - 100.0,
            pad + 14.0 * i as f64,
            escape(method)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
