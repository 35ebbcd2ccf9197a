//! CSV and SVG rendering of benchmark results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HarpError, Result};

use super::{BenchPoint, BenchResult, Variant};

pub const CSV_HEADER: [&str; 8] = ["label", "n", "variant", "repeats", "mean_s", "std_s", "ci95_s", "speedup"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Nine significant digits in scientific notation.
fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn successful(results: &[BenchResult]) -> Vec<&BenchPoint> {
    results.iter().flat_map(|r| &r.points).filter(|p| p.timing.is_ok()).collect()
}

/// Writes `bench.csv` and `bench.svg` into `out_dir`. Failed points are left
/// out of both files.
pub fn emit_report(results: &[BenchResult], out_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let points = successful(results);
    if points.is_empty() {
        return Err(HarpError::contract("no successful benchmark points to report"));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(CSV_HEADER)?;
    for p in &points {
        let t = p.timing.as_ref().expect("filtered");
        w.write_record([
            p.label.clone(),
            p.seq_len.to_string(),
            p.variant.to_string(),
            t.repeats.to_string(),
            sig9(t.mean_s),
            sig9(t.std_s),
            sig9(t.ci95_s),
            p.speedup.map(sig9).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let svg_path = dir.join("bench.svg");
    fs::write(&svg_path, render_svg(&points))?;
    Ok(ReportFiles { csv: csv_path, svg: svg_path })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 70.0;

fn render_svg(points: &[&BenchPoint]) -> String {
    let mut lens: Vec<usize> = points.iter().map(|p| p.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    let (lx_min, lx_max) = ((lens[0] as f64).log2(), (*lens.last().unwrap() as f64).log2());
    let y_max = points
        .iter()
        .map(|p| {
            let t = p.timing.as_ref().unwrap();
            t.mean_s + t.ci95_s
        })
        .fold(0.0f64, f64::max)
        * 1.1;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |n: usize| {
        let span = (lx_max - lx_min).max(1e-9);
        MARGIN + if lens.len() == 1 { plot_w / 2.0 } else { ((n as f64).log2() - lx_min) / span * plot_w }
    };
    let y_of = |s: f64| HEIGHT - MARGIN - if y_max > 0.0 { s / y_max * plot_h } else { 0.0 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">Forward latency vs sequence length</text>"#,
        WIDTH / 2.0
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for &n in &lens {
        let x = x_of(n);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{n}</text>"#,
            y0 + 18.0
        );
    }
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3e}</text>"#,
            x0 - 6.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">sequence length N (log scale)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 18 {})">seconds</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let mut series: Vec<(String, Variant)> = points.iter().map(|p| (p.label.clone(), p.variant)).collect();
    series.sort_by(|a, b| a.0.cmp(&b.0).then((a.1 as u8).cmp(&(b.1 as u8))));
    series.dedup();
    for (i, (label, variant)) in series.iter().enumerate() {
        let color = match variant {
            Variant::Dense => ["#1f77b4", "#17becf", "#9467bd"][i / 2 % 3],
            Variant::Pruned => ["#d62728", "#ff7f0e", "#8c564b"][i / 2 % 3],
        };
        let mut pts: Vec<&&BenchPoint> =
            points.iter().filter(|p| &p.label == label && p.variant == *variant).collect();
        pts.sort_by_key(|p| p.seq_len);
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.seq_len), y_of(p.timing.as_ref().unwrap().mean_s)))
            .collect();
        let name = xml_escape(&format!("{label} {variant}"));
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for p in &pts {
            let t = p.timing.as_ref().unwrap();
            let x = x_of(p.seq_len);
            let (ylo, yhi) = (y_of(t.mean_s - t.ci95_s), y_of(t.mean_s + t.ci95_s));
            let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{ylo:.2}" x2="{x:.2}" y2="{yhi:.2}" stroke="{color}"/>"#);
            let _ = writeln!(svg, r#"<line x1="{:.2}" y1="{ylo:.2}" x2="{:.2}" y2="{ylo:.2}" stroke="{color}"/>"#, x - 4.0, x + 4.0);
            let _ = writeln!(svg, r#"<line x1="{:.2}" y1="{yhi:.2}" x2="{:.2}" y2="{yhi:.2}" stroke="{color}"/>"#, x - 4.0, x + 4.0);
            let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, y_of(t.mean_s));
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            MARGIN + 10.0,
            MARGIN + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{name}</text>"#,
            MARGIN + 36.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
