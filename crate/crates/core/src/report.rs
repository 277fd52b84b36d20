//! Deterministic CSV, JSON and SVG writers shared by all experiment reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Version stamped into every serialized report.
pub const SCHEMA_VERSION: u32 = 1;

pub trait CsvReport {
    fn to_csv(&self) -> Result<String>;
}

pub fn emit_csv(report: &impl CsvReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report.to_csv()?)?;
    Ok(())
}

pub fn to_json(report: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn emit_json(report: &impl Serialize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(report)?)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const LOW: (f64, f64, f64) = (255.0, 255.0, 255.0);
const HIGH: (f64, f64, f64) = (8.0, 48.0, 107.0);

/// Linear colour scale: the matrix minimum maps to white, the maximum to dark blue.
/// A constant matrix is drawn entirely in the minimum colour.
fn color(v: f64, min: f64, max: f64) -> String {
    let t = if max > min && v.is_finite() { ((v - min) / (max - min)).clamp(0.0, 1.0) } else { 0.0 };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(LOW.0, HIGH.0), mix(LOW.1, HIGH.1), mix(LOW.2, HIGH.2))
}

fn fmt_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Heatmap with one cell per matrix entry, values printed in the cells.
pub fn heatmap_svg(matrix: &[Vec<f64>], row_labels: &[String], col_labels: &[String], title: &str) -> String {
    let cell = 40.0;
    let (left, top) = (90.0, 70.0);
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let (min, max) = matrix
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = left + cell * cols as f64 + 20.0;
    let height = top + cell * rows as f64 + 50.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, left, escape(title));
    for (j, label) in col_labels.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(label));
    }
    for (i, row) in matrix.iter().enumerate() {
        let y = top + cell * i as f64;
        if let Some(label) = row_labels.get(i) {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 6.0,
                y + cell / 2.0 + 4.0,
                escape(label)
            );
        }
        for (j, &v) in row.iter().enumerate() {
            let x = left + cell * j as f64;
            let fill = color(v, min, max);
            let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#999"/>"##);
            let mid = if max > min && (v - min) / (max - min) > 0.5 { "#fff" } else { "#000" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{mid}">{}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                fmt_cell(v)
            );
        }
    }
    let ly = top + cell * rows as f64 + 25.0;
    let (lo, hi) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{ly}">scale: {} (white) to {} (blue), linear</text>"#,
        fmt_cell(lo),
        fmt_cell(hi)
    );
    s.push_str("</svg>\n");
    s
}

pub fn emit_heatmap_svg(
    matrix: &[Vec<f64>],
    row_labels: &[String],
    col_labels: &[String],
    title: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, heatmap_svg(matrix, row_labels, col_labels, title))?;
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// One polyline per series over x = 0, 1, 2, ...; the y axis spans `y_range`.
pub fn line_plot_svg(series: &[(String, Vec<f64>)], x_label: &str, y_label: &str, title: &str, y_range: (f64, f64)) -> String {
    let (w, h) = (480.0, 300.0);
    let (left, top, plot_w, plot_h) = (60.0, 40.0, 300.0, 200.0);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
    let (y0, y1) = if y_range.1 > y_range.0 { y_range } else { (y_range.0, y_range.0 + 1.0) };
    let px = |i: usize| left + if n > 1 { plot_w * i as f64 / (n - 1) as f64 } else { plot_w / 2.0 };
    let py = |v: f64| top + plot_h * (1.0 - ((v - y0) / (y1 - y0)).clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    for i in 0..n {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{i}</text>"#, px(i), top + plot_h + 14.0);
    }
    for (frac, v) in [(0.0, y0), (0.5, (y0 + y1) / 2.0), (1.0, y1)] {
        let y = top + plot_h * (1.0 - frac);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 32.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = top + 12.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, left + plot_w + 10.0, left + plot_w + 26.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + plot_w + 30.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_scale_is_linear_between_extremes() {
        assert_eq!(color(0.0, 0.0, 1.0), "#ffffff");
        assert_eq!(color(1.0, 0.0, 1.0), "#08306b");
        assert_eq!(color(0.5, 0.0, 1.0), "#8498b5");
        assert_eq!(color(3.0, 3.0, 3.0), "#ffffff");
    }

    #[test]
    fn svg_output_is_stable() {
        let m = vec![vec![1.0, 0.5], vec![0.0, 2.0]];
        let labels = vec!["a".to_string(), "b<".to_string()];
        let a = heatmap_svg(&m, &labels, &labels, "t");
        assert_eq!(a, heatmap_svg(&m, &labels, &labels, "t"));
        assert!(a.contains("b&lt;"));
        let p = line_plot_svg(&[("x".into(), vec![0.0, 1.0])], "layer", "p", "t", (0.0, 1.0));
        assert!(p.contains("<polyline"));
    }
}
