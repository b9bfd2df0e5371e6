//! Curve export: CSV for tooling, SVG for a quick look.

use std::fmt::Write as _;
use std::path::Path;

use super::{reference_fppi, SubsetResult};
use crate::error::{Error, Result};

/// One row per operating point: `label,subset,threshold,fppi,miss_rate`.
/// `runs` pairs a series label (e.g. a model name) with its results.
pub fn write_curves_csv(path: &Path, runs: &[(String, Vec<SubsetResult>)]) -> Result<()> {
    let mut out = String::from("label,subset,threshold,fppi,miss_rate\n");
    for (label, results) in runs {
        for r in results {
            for p in &r.curve {
                writeln!(out, "{label},{},{},{},{}", r.subset.name, p.threshold, p.fppi, p.miss_rate)
                    .expect("writing to a string");
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Log-log miss rate versus FPPI plot over FPPI ∈ [1e-3, 1e1], one step
/// line per (label, subset) series, with the LAMR in the legend.
pub fn write_curves_svg(path: &Path, title: &str, runs: &[(String, Vec<SubsetResult>)]) -> Result<()> {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let (x_lo, x_hi) = (-3.0f64, 1.0f64);
    let (y_lo, y_hi) = (-2.0f64, 0.0f64);
    let px = |fppi: f64| m + (fppi.max(1e-3).log10().clamp(x_lo, x_hi) - x_lo) / (x_hi - x_lo) * (w - 2.0 * m);
    let py = |mr: f64| m + (y_hi - mr.max(1e-2).log10().clamp(y_lo, y_hi)) / (y_hi - y_lo) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (r0, r1) = (reference_fppi()[0], reference_fppi()[8]);
    let _ = writeln!(
        s,
        r##"<rect x="{:.1}" y="{m}" width="{:.1}" height="{}" fill="#f0f0f0"/>"##,
        px(r0),
        px(r1) - px(r0),
        h - 2.0 * m
    );
    for e in -3..=1 {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{m}" x2="{x:.1}" y2="{}" stroke="#ccc"/>"##, h - m);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#, h - m + 16.0);
    }
    for (v, label) in [(0.01, ".01"), (0.1, ".10"), (0.2, ".20"), (0.5, ".50"), (1.0, "1")] {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{m}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ccc"/>"##, w - m);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, m - 4.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">false positives per image</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">miss rate</text>"#,
        h / 2.0,
        h / 2.0
    );

    let mut k = 0;
    for (label, results) in runs {
        for r in results {
            let color = PALETTE[k % PALETTE.len()];
            let mut d = String::new();
            let mut prev: Option<(f64, f64)> = None;
            for p in &r.curve {
                let (x, y) = (px(p.fppi), py(p.miss_rate));
                match prev {
                    None => {
                        let _ = write!(d, "M{x:.1},{y:.1}");
                    }
                    Some((_, py0)) => {
                        let _ = write!(d, " L{x:.1},{py0:.1} L{x:.1},{y:.1}");
                    }
                }
                prev = Some((x, y));
            }
            if let Some((_, y)) = prev {
                let _ = write!(d, " L{:.1},{y:.1}", w - m);
            }
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
            let ly = m + 16.0 * k as f64 + 12.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly:.1}" fill="{color}" text-anchor="end">{} {} {:.2}%</text>"#,
                w - m - 6.0,
                escape(label),
                escape(&r.subset.name),
                100.0 * r.lamr
            );
            k += 1;
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
