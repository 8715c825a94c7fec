//! Deterministic SVG plot emission for RD curves and per-GOP quality
//! fluctuation. Hand-rolled markup: regenerating from the same CSVs gives
//! byte-identical files.

use super::csvio::{parse_csv_column, parse_curve_csv};
use crate::error::{Error, Result};
use crate::metrics::RDPoint;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: &[f64], ys: &[f64]) -> Axes {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in xs {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        for &y in ys {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x0 == x1 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y0 == y1 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let (px, py) = ((x1 - x0) * 0.06, (y1 - y0) * 0.06);
        Axes {
            x0: x0 - px,
            x1: x1 + px,
            y0: y0 - py,
            y1: y1 + py,
        }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_header(out: &mut String) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
}

fn draw_axes(out: &mut String, ax: &Axes, x_label: &str, y_label: &str) {
    let (left, right) = (MARGIN_L, WIDTH - MARGIN_R);
    let (top, bottom) = (MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(
        out,
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
         fill=\"none\" stroke=\"#444444\"/>",
        right - left,
        bottom - top
    );
    for i in 0..=4 {
        let fx = ax.x0 + (ax.x1 - ax.x0) * i as f64 / 4.0;
        let px = ax.sx(fx);
        let _ = writeln!(
            out,
            "<line x1=\"{px:.2}\" y1=\"{bottom:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#444444\"/>",
            bottom + 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{fx:.3}</text>",
            bottom + 18.0
        );
        let fy = ax.y0 + (ax.y1 - ax.y0) * i as f64 / 4.0;
        let py = ax.sy(fy);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{left:.2}\" y2=\"{py:.2}\" stroke=\"#444444\"/>",
            left - 5.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{fy:.2}</text>",
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x_label}</text>",
        (left + right) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{y_label}</text>",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    );
}

/// Rate-distortion plot. Single-point curves draw a marker only.
pub fn rd_plot_svg(curves: &[(String, Vec<(f64, f64)>)], y_label: &str) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (_, pts) in curves {
        for &(x, y) in pts {
            xs.push(x);
            ys.push(y);
        }
    }
    let ax = Axes::fit(&xs, &ys);
    let mut out = String::new();
    svg_header(&mut out);
    draw_axes(&mut out, &ax, "bits per pixel", y_label);
    for (ci, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        if pts.len() > 1 {
            let mut path = String::new();
            for &(x, y) in pts {
                let _ = write!(path, "{:.2},{:.2} ", ax.sx(x), ax.sy(y));
            }
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.trim_end()
            );
        }
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                ax.sx(x),
                ax.sy(y)
            );
        }
        let ly = MARGIN_T + 16.0 + 16.0 * ci as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            out,
            "<line x1=\"{lx:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            ly - 4.0,
            lx + 18.0,
            ly - 4.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{ly:.2}\">{label}</text>",
            lx + 24.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Per-frame quality trace with GOP boundaries marked.
pub fn fluctuation_plot_svg(trace: &[(usize, f64)], gop: usize) -> String {
    let xs: Vec<f64> = trace.iter().map(|&(i, _)| i as f64).collect();
    let ys: Vec<f64> = trace.iter().map(|&(_, v)| v).collect();
    let ax = Axes::fit(&xs, &ys);
    let mut out = String::new();
    svg_header(&mut out);
    draw_axes(&mut out, &ax, "frame", "quality (dB)");
    if gop > 0 {
        let mut b = gop;
        while (b as f64) < ax.x1 {
            let px = ax.sx(b as f64);
            let _ = writeln!(
                out,
                "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" \
                 stroke=\"#bbbbbb\" stroke-dasharray=\"4 3\"/>",
                MARGIN_T,
                HEIGHT - MARGIN_B
            );
            b += gop;
        }
    }
    let mut path = String::new();
    for &(i, v) in trace {
        let _ = write!(path, "{:.2},{:.2} ", ax.sx(i as f64), ax.sy(v));
    }
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
        path.trim_end(),
        PALETTE[0]
    );
    out.push_str("</svg>\n");
    out
}

/// Render RD curves (grouped by label) and/or a fluctuation trace from CSV
/// inputs into `out_dir`. Returns the written paths.
pub fn emit_plots(
    rd_csvs: &[PathBuf],
    fluctuation_csv: Option<&Path>,
    gop: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !rd_csvs.is_empty() {
        let mut by_label: BTreeMap<String, Vec<RDPoint>> = BTreeMap::new();
        for path in rd_csvs {
            for p in parse_curve_csv(path)? {
                by_label.entry(p.label.clone()).or_default().push(p);
            }
        }
        let curves: Vec<(String, Vec<(f64, f64)>)> = by_label
            .into_iter()
            .map(|(label, mut pts)| {
                pts.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
                (label, pts.into_iter().map(|p| (p.bpp, p.quality)).collect())
            })
            .collect();
        if curves.is_empty() {
            return Err(Error::data("no RD points found in inputs".to_string()));
        }
        let svg = rd_plot_svg(&curves, "quality");
        let path = out_dir.join("rd_curves.svg");
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    if let Some(csv) = fluctuation_csv {
        let values = parse_csv_column(csv, "psnr")?;
        let trace: Vec<(usize, f64)> = values.into_iter().enumerate().collect();
        if trace.is_empty() {
            return Err(Error::data(format!("{}: no rows", csv.display())));
        }
        let svg = fluctuation_plot_svg(&trace, gop);
        let path = out_dir.join("fluctuation.svg");
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}
