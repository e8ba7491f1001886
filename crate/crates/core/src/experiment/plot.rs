//! Log-log SVG plots of median error against sample size.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::evaluation::{CellSummary, RateStudyReport};

use super::ExperimentError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Pixel positions of what was drawn, for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotGeometry {
    pub beta: f64,
    /// `(d, [(x, y)])` median markers per series.
    pub markers: Vec<(usize, Vec<(f64, f64)>)>,
    pub guide: [(f64, f64); 2],
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, m: f64) -> f64 {
        LEFT + (m.log10() - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, e: f64) -> f64 {
        HEIGHT - BOTTOM - (e.log10() - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn pad(lo: f64, hi: f64, frac: f64) -> (f64, f64) {
    let span = (hi - lo).max(1e-3);
    (lo - frac * span, hi + frac * span)
}

/// One figure for smoothness `beta`: every series with at least three sample
/// sizes, quartile whiskers, and a dashed theoretical guide anchored at the
/// first median of the first series.
pub fn render_plot(report: &RateStudyReport, beta: f64) -> Result<(String, PlotGeometry), ExperimentError> {
    let mut series: Vec<(usize, Vec<&CellSummary>)> = Vec::new();
    for s in report.slopes.iter().filter(|s| s.beta == beta) {
        let cells = report.cells_for(s.d, beta);
        if cells.len() >= 3 && cells.iter().all(|c| c.q1_composed > 0.0 && c.median_composed > 0.0) {
            series.push((s.d, cells));
        }
    }
    if series.is_empty() {
        return Err(ExperimentError::Plot(format!("no series with three sample sizes for beta = {beta}")));
    }
    let theory = -2.0 * beta / (2.0 * beta + 1.0);
    let all: Vec<&CellSummary> = series.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in &all {
        x_lo = x_lo.min((c.m as f64).log10());
        x_hi = x_hi.max((c.m as f64).log10());
        y_lo = y_lo.min(c.q1_composed.log10());
        y_hi = y_hi.max(c.q3_composed.log10());
    }
    let anchor = series[0].1[0];
    let (ax, ay) = ((anchor.m as f64).log10(), anchor.median_composed.log10());
    let guide_at = |x: f64| ay + theory * (x - ax);
    y_lo = y_lo.min(guide_at(x_lo)).min(guide_at(x_hi));
    y_hi = y_hi.max(guide_at(x_lo)).max(guide_at(x_hi));
    let axes = Axes { x: pad(x_lo, x_hi, 0.08), y: pad(y_lo, y_hi, 0.08) };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for c in &series[0].1 {
        let x = axes.px(c.m as f64);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 18.0, c.m);
    }
    for k in axes.y.0.ceil() as i32..=axes.y.1.floor() as i32 {
        let y = axes.py(10f64.powi(k));
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{k}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">sample size M</text>"#, (x0 + x1) / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">composed test MSE</text>"#,
        (y0 + y1) / 2.0
    );
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">beta = {beta}</text>"#, (x0 + x1) / 2.0);

    let g0 = (axes.px(10f64.powf(x_lo)), axes.py(10f64.powf(guide_at(x_lo))));
    let g1 = (axes.px(10f64.powf(x_hi)), axes.py(10f64.powf(guide_at(x_hi))));
    let _ = writeln!(
        svg,
        r#"<line class="guide" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        g0.0, g0.1, g1.0, g1.1
    );

    let mut markers = Vec::new();
    let mut legend = Vec::new();
    for (idx, (d, cells)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let pts: Vec<(f64, f64)> = cells.iter().map(|c| (axes.px(c.m as f64), axes.py(c.median_composed))).collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, path.join(" "));
        for (c, &(x, y)) in cells.iter().zip(&pts) {
            let (lo, hi) = (axes.py(c.q1_composed), axes.py(c.q3_composed));
            let _ = writeln!(svg, r#"<line x1="{x:.3}" y1="{lo:.3}" x2="{x:.3}" y2="{hi:.3}" stroke="{color}"/>"#);
            for cap in [lo, hi] {
                let _ = writeln!(svg, r#"<line x1="{:.3}" y1="{cap:.3}" x2="{:.3}" y2="{cap:.3}" stroke="{color}"/>"#, x - 4.0, x + 4.0);
            }
            let _ = writeln!(svg, r#"<circle class="median" cx="{x:.3}" cy="{y:.3}" r="4" fill="{color}"/>"#);
        }
        let slope = report.slope(*d, beta).map(|s| s.fit.slope).unwrap_or(f64::NAN);
        legend.push((color, format!("d = {d}: slope {slope:.3}"), false));
        markers.push((*d, pts));
    }
    legend.push(("gray", format!("theory: slope {theory:.3}"), true));
    for (i, (color, label, dashed)) in legend.iter().enumerate() {
        let y = y0 + 18.0 + 18.0 * i as f64;
        let lx = x1 - 190.0;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 24.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{label}</text>"#, lx + 30.0, y + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok((svg, PlotGeometry { beta, markers, guide: [g0, g1] }))
}

/// Writes `rate_beta{β}.svg` for every smoothness with a plottable series.
pub fn emit_plots(report: &RateStudyReport, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut betas: Vec<f64> = report.slopes.iter().map(|s| s.beta).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    if betas.is_empty() {
        return Err(ExperimentError::Plot("report has no series with three sample sizes".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for beta in betas {
        let (svg, _) = render_plot(report, beta)?;
        let path = out.join(format!("rate_beta{beta}.svg"));
        std::fs::write(&path, svg)?;
        paths.push(path);
    }
    Ok(paths)
}
