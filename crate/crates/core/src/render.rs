//! Deterministic SVG output for correlation matrices and layer curves, plus
//! plain-text summary tables.
//!
//! Heatmap colour is a piecewise-linear RGB interpolation anchored at
//! `-1 → #2166ac`, `0 → #f7f7f7`, `+1 → #b2182b`; values are clamped to
//! `[-1, 1]`. Missing cells are drawn in `#d9d9d9` and labelled `n/a`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::fewshot::LinkCurves;
use crate::probe::{LayerScan, SpecificityRow};
use crate::report::CorrelationReport;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

pub type Result<T> = std::result::Result<T, RenderError>;

const NEGATIVE: [f64; 3] = [33.0, 102.0, 172.0];
const NEUTRAL: [f64; 3] = [247.0, 247.0, 247.0];
const POSITIVE: [f64; 3] = [178.0, 24.0, 43.0];
const MISSING: &str = "#d9d9d9";
const FONT: &str = "font-family=\"sans-serif\"";

/// Fill colour for a correlation value.
pub fn diverging_color(value: f64) -> String {
    let v = value.clamp(-1.0, 1.0);
    let (from, to, t) = if v < 0.0 { (NEUTRAL, NEGATIVE, -v) } else { (NEUTRAL, POSITIVE, v) };
    let c: Vec<u8> = (0..3).map(|i| (from[i] + (to[i] - from[i]) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Two-decimal label without a negative zero.
pub fn format_rho(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" { "0.00".to_string() } else { s }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Dark text on light cells, light text on saturated ones.
fn text_color(value: f64) -> &'static str {
    if value.abs() > 0.6 { "#ffffff" } else { "#000000" }
}

pub fn emit_heatmap(report: &CorrelationReport) -> Result<String> {
    let (nr, nc) = (report.rows.len(), report.cols.len());
    if nr == 0 || nc == 0 {
        return Err(RenderError::InvalidReport("empty matrix".into()));
    }
    if report.cells.len() != nr || report.cells.iter().any(|r| r.len() != nc) {
        return Err(RenderError::InvalidReport("cell grid does not match labels".into()));
    }
    if report.cells.iter().flatten().flatten().any(|c| !c.rho.is_finite()) {
        return Err(RenderError::InvalidReport("non-finite coefficient".into()));
    }
    let cell = 64;
    let label_w = 10 + 8 * report.rows.iter().map(|r| r.chars().count()).max().unwrap_or(0).max(4);
    let top = 56;
    let width = label_w + nc * cell + 10;
    let height = top + nr * cell + 10;
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">");
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" {FONT} font-size=\"14\" text-anchor=\"middle\">{}</text>", width / 2, escape(&report.title));
    for (j, col) in report.cols.iter().enumerate() {
        let x = label_w + j * cell + cell / 2;
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{}</text>", top - 8, escape(col));
    }
    for (i, row) in report.rows.iter().enumerate() {
        let y = top + i * cell;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"10\" text-anchor=\"end\">{}</text>",
            label_w - 6,
            y + cell / 2 + 4,
            escape(row)
        );
        for (j, c) in report.cells[i].iter().enumerate() {
            let x = label_w + j * cell;
            let (fill, label, ink) = match c {
                Some(c) => (diverging_color(c.rho), format!("{}{}", format_rho(c.rho), c.stars), text_color(c.rho)),
                None => (MISSING.to_string(), "n/a".to_string(), "#000000"),
            };
            let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#ffffff\"/>");
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"11\" text-anchor=\"middle\" fill=\"{ink}\">{}</text>",
                x + cell / 2,
                y + cell / 2 + 4,
                escape(&label)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub title: String,
    pub layers: Vec<u32>,
    pub series: Vec<Series>,
}

fn series(name: &str, color: &str, values: impl Iterator<Item = Option<(f64, f64)>>) -> Option<Series> {
    let (mean, sd): (Vec<f64>, Vec<f64>) = values.collect::<Option<Vec<_>>>()?.into_iter().unzip();
    Some(Series { name: name.into(), color: color.into(), mean, sd })
}

impl From<&LayerScan> for CurveSet {
    fn from(scan: &LayerScan) -> Self {
        let p = &scan.points;
        let all = [
            series("apparent", "#377eb8", p.iter().map(|q| Some((q.apparent.mean, q.apparent.sd)))),
            series("fidelity", "#4daf4a", p.iter().map(|q| q.fidelity.map(|m| (m.mean, m.sd)))),
            series("contamination", "#984ea3", p.iter().map(|q| q.contamination.map(|m| (m.mean, m.sd)))),
        ];
        CurveSet {
            title: format!("{} \u{2192} {}", scan.source, scan.target),
            layers: p.iter().map(|q| q.layer).collect(),
            series: all.into_iter().flatten().collect(),
        }
    }
}

impl From<&LinkCurves> for CurveSet {
    fn from(link: &LinkCurves) -> Self {
        let p = &link.points;
        let all = [
            series("r(ref, I | A)", "#377eb8", p.iter().map(|q| Some((q.ref_internal.mean, q.ref_internal.sd)))),
            series("r(I, output | A)", "#4daf4a", p.iter().map(|q| Some((q.internal_output.mean, q.internal_output.sd)))),
            series("difference", "#e41a1c", p.iter().map(|q| Some((q.difference.mean, q.difference.sd)))),
        ];
        CurveSet {
            title: format!("{} (m = {})", link.attribute, link.m),
            layers: p.iter().map(|q| q.layer).collect(),
            series: all.into_iter().flatten().collect(),
        }
    }
}

/// Line chart of each series over layers with ±sd bands on a fixed `[-1, 1]` axis.
pub fn emit_layer_curves(curves: &CurveSet) -> Result<String> {
    let n = curves.layers.len();
    if n == 0 {
        return Err(RenderError::InvalidReport("no layers".into()));
    }
    if curves.series.is_empty() {
        return Err(RenderError::InvalidReport("no series".into()));
    }
    for s in &curves.series {
        if s.mean.len() != n || s.sd.len() != n {
            return Err(RenderError::InvalidReport(format!(
                "series {:?} has {} points for {n} layers",
                s.name,
                s.mean.len().min(s.sd.len())
            )));
        }
        if s.mean.iter().chain(&s.sd).any(|v| !v.is_finite()) {
            return Err(RenderError::InvalidReport(format!("series {:?} has non-finite values", s.name)));
        }
    }
    let (width, height) = (640.0, 360.0);
    let (left, right, top, bottom) = (48.0, 140.0, 32.0, 40.0);
    let pw = width - left - right;
    let ph = height - top - bottom;
    let x_of = |i: usize| if n == 1 { left + pw / 2.0 } else { left + pw * i as f64 / (n - 1) as f64 };
    let y_of = |v: f64| top + ph * (1.0 - v.clamp(-1.0, 1.0)) / 2.0;

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">");
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>");
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"20\" {FONT} font-size=\"14\" text-anchor=\"middle\">{}</text>", left + pw / 2.0, escape(&curves.title));
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let y = y_of(tick);
        let stroke = if tick == 0.0 { "#888888" } else { "#e5e5e5" };
        let _ = writeln!(s, "<line x1=\"{left:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{stroke}\"/>", left + pw);
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"end\">{tick:.1}</text>", left - 6.0, y + 3.0);
    }
    for (i, layer) in curves.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\" text-anchor=\"middle\">{layer}</text>",
            x_of(i),
            top + ph + 14.0
        );
    }
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"11\" text-anchor=\"middle\">layer</text>", left + pw / 2.0, height - 8.0);
    for (k, se) in curves.series.iter().enumerate() {
        let upper: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", x_of(i), y_of(se.mean[i] + se.sd[i]))).collect();
        let lower: Vec<String> = (0..n).rev().map(|i| format!("{:.2},{:.2}", x_of(i), y_of(se.mean[i] - se.sd[i]))).collect();
        let _ = writeln!(s, "<polygon points=\"{} {}\" fill=\"{}\" fill-opacity=\"0.2\" stroke=\"none\"/>", upper.join(" "), lower.join(" "), se.color);
        let line: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", x_of(i), y_of(se.mean[i]))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>", line.join(" "), se.color);
        for i in 0..n {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>", x_of(i), y_of(se.mean[i]), se.color);
        }
        let ly = top + 12.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{}\" stroke-width=\"2\"/>", lx + 16.0, se.color);
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" {FONT} font-size=\"10\">{}</text>", lx + 20.0, ly + 3.0, escape(&se.name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Tab-separated `setting`, diagonal and off-diagonal `mean ± sd` rows.
pub fn specificity_table(rows: &[SpecificityRow]) -> String {
    let mut s = String::from("setting\tdiagonal\toff_diagonal\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", r.setting, r.diagonal, r.off_diagonal);
    }
    s
}
