//! Self-contained SVG charts from metrics rows.
//!
//! Everything is assembled from strings with fixed-precision formatting,
//! so the same rows always produce byte-identical files. An empty input
//! still yields a valid chart with axes, just no curves.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::metrics::MetricsRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f6fb2", "#d1495b", "#3d9970", "#b07aa1", "#e0851f", "#5e5e5e",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return String::from("0");
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Bounds {
    lo: f64,
    hi: f64,
}

fn bounds(values: impl Iterator<Item = f64>) -> Bounds {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Bounds { lo: 0.0, hi: 1.0 };
    }
    if lo == hi {
        return Bounds { lo: lo - 0.5, hi: hi + 0.5 };
    }
    let pad = (hi - lo) * 0.05;
    Bounds { lo: lo - pad, hi: hi + pad }
}

impl Bounds {
    fn to_px(&self, v: f64, px_lo: f64, px_hi: f64) -> f64 {
        px_lo + (v - self.lo) / (self.hi - self.lo) * (px_hi - px_lo)
    }
}

/// One finished chart as SVG text.
pub fn chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let x_px = |v: f64| xb.to_px(v, MARGIN_L, WIDTH - MARGIN_R);
    let y_px = |v: f64| yb.to_px(v, HEIGHT - MARGIN_B, MARGIN_T);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        fmt(WIDTH / 2.0)
    ));

    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let xv = xb.lo + fx * (xb.hi - xb.lo);
        let yv = yb.lo + fx * (yb.hi - yb.lo);
        let xp = fmt(x_px(xv));
        let yp = fmt(y_px(yv));
        svg.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{}\" x2=\"{xp}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            fmt(MARGIN_T),
            fmt(HEIGHT - MARGIN_B)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{}\" y2=\"{yp}\" stroke=\"#dddddd\"/>\n",
            fmt(MARGIN_L),
            fmt(WIDTH - MARGIN_R)
        ));
        svg.push_str(&format!(
            "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(HEIGHT - MARGIN_B + 18.0),
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 8.0),
            fmt(y_px(yv) + 4.0),
            fmt_tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 12.0)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(x_px(x)), fmt(y_px(y))))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"{color}\"/>\n",
                fmt(x_px(x)),
                fmt(y_px(y))
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            fmt(WIDTH - MARGIN_R - 150.0),
            fmt(MARGIN_T + 16.0 * (i as f64 + 1.0)),
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn by_split(rows: &[MetricsRow], value: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<Series> {
    let mut out = Vec::new();
    for split in ["train", "eval"] {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| value(r).map(|v| (r.step as f64, v)))
            .collect();
        if !points.is_empty() {
            out.push(Series { label: split.to_string(), points });
        }
    }
    out
}

/// Writes loss.svg, accuracy.svg, and lambda.svg for the given rows and
/// returns the file paths.
pub fn write_charts(rows: &[MetricsRow], out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let loss = chart("loss", "step", "loss", &by_split(rows, |r| Some(r.loss)));
    let acc = chart("accuracy", "step", "accuracy", &by_split(rows, |r| r.accuracy));

    let layers = rows.iter().map(|r| r.lambda.len()).max().unwrap_or(0);
    let lambda_series: Vec<Series> = (0..layers)
        .map(|i| Series {
            label: format!("layer {i}"),
            points: rows
                .iter()
                .filter(|r| r.split == "train")
                .filter_map(|r| r.lambda.get(i).map(|&v| (r.step as f64, v)))
                .collect(),
        })
        .collect();
    let lambda = chart("mixing ratio", "step", "mean sigma(lambda)", &lambda_series);

    let mut written = Vec::new();
    for (name, text) in [("loss.svg", loss), ("accuracy.svg", acc), ("lambda.svg", lambda)] {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
