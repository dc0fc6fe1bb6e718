//! CSV and SVG output for fitted curves and distribution functions.

use std::fmt::Write as _;
use std::io::Write;

use crate::diagnostics::{CurveFit, FosdReport};

/// A named numeric column.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            values,
        }
    }
}

/// Writes equal-length columns as CSV using shortest round-trip formatting.
pub fn write_columns_csv<W: Write>(out: W, columns: &[Column]) -> csv::Result<()> {
    let n = columns.first().map_or(0, |c| c.values.len());
    assert!(columns.iter().all(|c| c.values.len() == n), "columns differ in length");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns.iter().map(|c| c.name.as_str()))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c.values[i].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `grid`, then `fitted_<name>`, `band_lo_<name>`, `band_hi_<name>`
/// per curve. All curves must share the grid of the first.
pub fn curve_columns(curves: &[(&str, &CurveFit)]) -> Vec<Column> {
    let mut cols = Vec::with_capacity(1 + 3 * curves.len());
    if let Some((_, first)) = curves.first() {
        cols.push(Column::new("grid", first.grid.clone()));
    }
    for (name, c) in curves {
        assert_eq!(c.grid, cols[0].values, "curves are on different grids");
        cols.push(Column::new(format!("fitted_{name}"), c.fitted.clone()));
        cols.push(Column::new(format!("band_lo_{name}"), c.band_lo.clone()));
        cols.push(Column::new(format!("band_hi_{name}"), c.band_hi.clone()));
    }
    cols
}

/// Columns `grid`, then `cdf_<group>`, `band_lo_<group>`, `band_hi_<group>`
/// for control and treated, with bands `cdf +/- eps` clipped to `[0, 1]`.
pub fn cdf_columns(report: &FosdReport, eps_control: f64, eps_treated: f64) -> Vec<Column> {
    let mut cols = vec![Column::new("grid", report.grid.clone())];
    for (name, cdf, eps) in [
        ("control", &report.cdf_control, eps_control),
        ("treated", &report.cdf_treated, eps_treated),
    ] {
        cols.push(Column::new(format!("cdf_{name}"), cdf.clone()));
        cols.push(Column::new(format!("band_lo_{name}"), cdf.iter().map(|v| (v - eps).max(0.0)).collect()));
        cols.push(Column::new(format!("band_hi_{name}"), cdf.iter().map(|v| (v + eps).min(1.0)).collect()));
    }
    cols
}

/// One line of a chart with an optional pointwise band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

impl Series {
    pub fn from_curve(label: impl Into<String>, c: &CurveFit) -> Self {
        Series {
            label: label.into(),
            x: c.grid.clone(),
            y: c.fitted.clone(),
            band: Some((c.band_lo.clone(), c.band_hi.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartLabels {
    pub title: String,
    pub x: String,
    pub y: String,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Static line chart with axes, tick labels, legend and translucent bands.
pub fn line_chart_svg(labels: &ChartLabels, series: &[Series]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let (x0, x1) = range(series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = range(series.iter().flat_map(|s| {
        let band = s.band.iter().flat_map(|(lo, hi)| lo.iter().chain(hi));
        s.y.iter().chain(band).copied()
    }));
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&labels.title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{ml} {mt} V{} H{}" fill="none" stroke="black"/>"#,
        mt + ph,
        ml + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{py:.2}" x2="{ml}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            ml - 5.0,
            ml - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        HEIGHT - 10.0,
        escape(&labels.x)
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(&labels.y)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if let Some((lo, hi)) = &s.band {
            let pts: Vec<String> = s
                .x
                .iter()
                .zip(hi)
                .chain(s.x.iter().zip(lo).rev())
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = s.x.iter().zip(&s.y).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = mt + 10.0 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            ml + pw - 110.0,
            ml + pw - 90.0,
            ml + pw - 85.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
