//! Self-contained SVG rendering of report CSVs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// `label,value` rows drawn as bars.
    Histogram,
    /// First column is x; every other all-numeric column is a series.
    Curve,
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok(Table { header, rows })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn parse(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Format(format!("{}: line {line}: '{s}' is not a finite number", path.display())))
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    s
}

fn tick(s: &mut String, y: f64, label: f64) {
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{y:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        fmt_num(label)
    );
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn plot_area() -> (f64, f64) {
    (WIDTH - 1.5 * MARGIN, HEIGHT - MARGIN - MARGIN / 1.5)
}

fn histogram(path: &Path, t: &Table) -> Result<String> {
    let title = t.header.get(1).cloned().unwrap_or_default();
    let mut s = open_svg(&title);
    let bars: Vec<(String, f64)> = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label = r.first().cloned().unwrap_or_default();
            let v = parse(path, i + 2, r.get(1).map_or("", String::as_str))?;
            Ok((label, v))
        })
        .collect::<Result<_>>()?;
    if bars.is_empty() {
        s.push_str("</svg>\n");
        return Ok(s);
    }
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let (w, h) = plot_area();
    let slot = w / bars.len() as f64;
    let base = HEIGHT - MARGIN;
    tick(&mut s, base, 0.0);
    tick(&mut s, base - h, scale);
    let _ = writeln!(s, r#"<g class="bars">"#);
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = h * v.max(0.0) / scale;
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{}"/>"#,
            base - bh,
            slot * 0.8,
            PALETTE[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + slot * 0.4,
            base + 14.0,
            escape(label)
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

fn curve(path: &Path, t: &Table) -> Result<String> {
    let title = t.header.first().cloned().unwrap_or_default();
    let mut s = open_svg(&title);
    if t.rows.is_empty() || t.header.is_empty() {
        s.push_str("</svg>\n");
        return Ok(s);
    }
    let xs: Vec<f64> = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| parse(path, i + 2, r.first().map_or("", String::as_str)))
        .collect::<Result<_>>()?;
    let series: Vec<(usize, Vec<f64>)> = (1..t.header.len())
        .filter_map(|c| {
            let ys: Option<Vec<f64>> = t
                .rows
                .iter()
                .map(|r| r.get(c).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
                .collect();
            ys.map(|ys| (c, ys))
        })
        .collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let all_y = series.iter().flat_map(|(_, ys)| ys.iter().copied());
    let (ymin, ymax) = all_y.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = plot_area();
    let base = HEIGHT - MARGIN;
    let px = |x: f64| MARGIN + w * (x - xmin) / span(xmin, xmax);
    let py = |y: f64| base - h * (y - ymin) / span(ymin, ymax);
    if !series.is_empty() {
        tick(&mut s, base, ymin);
        tick(&mut s, base - h, ymin + span(ymin, ymax));
    }
    let _ = writeln!(s, r#"<g class="series" fill="none" stroke-width="1.5">"#);
    for (k, (c, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline stroke="{color}" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" fill="{color}" stroke="none">{}</text>"#,
            MARGIN + 6.0,
            MARGIN / 1.5 + 12.0 * (k + 1) as f64,
            escape(&t.header[*c])
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

/// Renders `csv_path` and writes the SVG to `svg_path`.
pub fn export_svg_plot(csv_path: &Path, kind: PlotKind, svg_path: &Path) -> Result<()> {
    let svg = render_svg(csv_path, kind)?;
    std::fs::write(svg_path, svg)?;
    Ok(())
}

pub fn render_svg(csv_path: &Path, kind: PlotKind) -> Result<String> {
    let table = read_table(csv_path)?;
    match kind {
        PlotKind::Histogram => histogram(csv_path, &table),
        PlotKind::Curve => curve(csv_path, &table),
    }
}
