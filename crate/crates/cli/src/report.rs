//! CSV rows and the singular-value plot.

use std::fmt::Write as _;
use std::path::Path;

use hsvr_core::hankel::HsvReport;
use hsvr_core::net::EpochMetrics;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub reg: f64,
    pub eval_acc: f64,
    pub wall_time_s: f64,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            ce: m.ce,
            reg: m.reg,
            eval_acc: m.eval_acc,
            wall_time_s: m.wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HsvRow {
    pub layer: usize,
    /// 1-based position in the descending order.
    pub index: usize,
    pub sigma: f64,
    pub cumulative_energy_fraction: f64,
}

/// Training-time snapshot row: an [`HsvRow`] tagged with its epoch.
#[derive(Debug, Clone, Serialize)]
pub struct HsvSnapshotRow {
    pub epoch: usize,
    pub layer: usize,
    pub index: usize,
    pub sigma: f64,
    pub cumulative_energy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateRow {
    pub layer: usize,
    pub r: usize,
    pub tail_sum: f64,
    /// `2 Σ_{i>r} σᵢ`, the gain bound of the output error.
    pub bound_constant: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapBenchRow {
    pub solver: String,
    pub n: usize,
    pub median_s: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanBenchRow {
    pub method: String,
    pub workers: usize,
    pub len: usize,
    pub n: usize,
    pub median_s: f64,
    pub runs: usize,
}

pub fn hsv_rows(report: &HsvReport) -> Vec<HsvRow> {
    let mut rows = Vec::new();
    for (layer, sigmas) in report.sigmas.iter().enumerate() {
        let total = report.energies[layer];
        let mut acc = 0.0;
        for (i, &s) in sigmas.iter().enumerate() {
            acc += s;
            rows.push(HsvRow {
                layer,
                index: i + 1,
                sigma: s,
                cumulative_energy_fraction: if total > 0.0 { acc / total } else { 0.0 },
            });
        }
    }
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Least-squares slope of `log t` against `log n`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, t)| (n.ln(), t.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let k = xs.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of log10 σᵢ against i, one line per layer.
pub fn hsv_svg(report: &HsvReport) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_len = report.sigmas.iter().map(Vec::len).max().unwrap_or(1).max(2);
    let logs: Vec<Vec<f64>> = report
        .sigmas
        .iter()
        .map(|s| s.iter().filter(|&&v| v > 0.0).map(|v| v.log10()).collect())
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in logs.iter().flatten() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 0.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (max_len - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline points="{pad},{pad} {pad},{} {},{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">index i</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">log10 sigma_i</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{hi:.1}</text>"#,
        pad - 4.0,
        pad + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{lo:.1}</text>"#,
        pad - 4.0,
        h - pad
    );
    for (layer, line) in logs.iter().enumerate() {
        let color = COLORS[layer % COLORS.len()];
        let pts: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">layer {layer}</text>"#,
            w - pad - 60.0,
            pad + 14.0 * (layer as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
