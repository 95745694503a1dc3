//! F1-versus-ratio figure as a standalone SVG, plus a merged CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::eval::{read_csv, ResultRow};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 52.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub rows: Vec<ResultRow>,
}

/// Reads result files in order; each must hold at least one row.
pub fn load_series(csvs: &[PathBuf]) -> Result<Vec<Series>> {
    if csvs.is_empty() {
        return Err(Error::invalid("no result files given"));
    }
    csvs.iter()
        .map(|p| {
            let rows = read_csv(p)?;
            if rows.is_empty() {
                return Err(Error::invalid(format!("{} has no ratio rows", p.display())));
            }
            let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(Series { label, rows })
        })
        .collect()
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.rows.iter().map(|r| r.ratio));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let (y0, y1) = (0.0, 1.0);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black" fill="none"><rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}"/></g>"#
    );
    let mut ticks = String::new();
    let step = nice_step(x1 - x0);
    let mut t = (x0 / step).ceil() * step;
    while t <= x1 + 1e-9 {
        let _ = writeln!(
            ticks,
            r#"<line x1="{x:.2}" y1="{yb:.2}" x2="{x:.2}" y2="{yt:.2}" stroke="black"/><text x="{x:.2}" y="{ty:.2}" text-anchor="middle">{t}</text>"#,
            x = sx(t),
            yb = sy(y0),
            yt = sy(y0) + 5.0,
            ty = sy(y0) + 18.0,
            t = (t * 1000.0).round() / 1000.0
        );
        t += step;
    }
    for k in 0..=5 {
        let v = k as f64 * 0.2;
        let _ = writeln!(
            ticks,
            r##"<line x1="{xl:.2}" y1="{y:.2}" x2="{xr:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{tx:.2}" y="{ty:.2}" text-anchor="end">{v:.1}</text>"##,
            xl = MARGIN_L,
            xr = MARGIN_L + pw,
            y = sy(v),
            tx = MARGIN_L - 6.0,
            ty = sy(v) + 4.0
        );
    }
    let _ = writeln!(svg, r#"<g class="ticks">{ticks}</g>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">resolution difference ratio</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">F1</text>"#,
        MARGIN_T + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let points: Vec<String> = s
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.ratio), sy(r.f1.clamp(0.0, 1.0))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            escape(&s.label),
            points.join(" ")
        );
    }
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let y = MARGIN_T + 12.0 + 18.0 * i as f64;
        let x = MARGIN_L + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{colour}" stroke-width="2"/><text class="legend-entry" x="{:.2}" y="{:.2}">{}</text>"#,
            x + 20.0,
            x + 26.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    svg
}

/// Merged rows with the run label prepended.
pub fn write_merged_csv(path: &Path, series: &[Series]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "ratio", "precision", "recall", "f1", "iou", "oa", "n_pixels"])?;
    for s in series {
        for r in &s.rows {
            w.write_record([
                s.label.clone(),
                r.ratio.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.iou.to_string(),
                r.oa.to_string(),
                r.n_pixels.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the figure at `out` and the merged CSV next to it. Nothing is
/// written if any input is invalid.
pub fn plot_curves(csvs: &[PathBuf], out: &Path) -> Result<Vec<Series>> {
    let series = load_series(csvs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, render_svg(&series)).map_err(|e| Error::io(out, e))?;
    write_merged_csv(&out.with_extension("csv"), &series)?;
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(ratios: &[f64]) -> Vec<ResultRow> {
        ratios
            .iter()
            .map(|&r| ResultRow {
                ratio: r,
                precision: 0.8,
                recall: 0.7,
                f1: 1.0 / r,
                iou: 0.5,
                oa: 0.9,
                n_pixels: 100,
            })
            .collect()
    }

    #[test]
    fn one_polyline_per_series_with_all_vertices() {
        let s = vec![
            Series {
                label: "a".into(),
                rows: rows(&[1.0, 1.3, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0]),
            },
            Series {
                label: "b<c>".into(),
                rows: rows(&[1.0, 2.0]),
            },
        ];
        let svg = render_svg(&s);
        let lines: Vec<&str> = svg.lines().filter(|l| l.contains("<polyline")).collect();
        assert_eq!(lines.len(), 2);
        let pts = lines[0].split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 8);
        let legend: Vec<&str> = svg.matches("class=\"legend-entry\"").collect();
        assert_eq!(legend.len(), 2);
        assert!(svg.find(">a</text>").unwrap() < svg.find(">b&lt;c&gt;</text>").unwrap());
    }

    #[test]
    fn empty_csv_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("empty.csv");
        fs::write(&csv, "ratio,precision,recall,f1,iou,oa,n_pixels\n").unwrap();
        let out = dir.path().join("fig.svg");
        assert!(plot_curves(&[csv], &out).is_err());
        assert!(!out.exists());
        assert!(plot_curves(&[], &out).is_err());
    }
}
