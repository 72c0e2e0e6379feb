//! CSV tables and SVG line plots.
//!
//! CSV output always carries a header row; floats use Rust's shortest
//! round-trip formatting.

use std::fmt::Write as _;
use std::io::Write;

use crate::complexity::SweepTable;
use crate::engine::TrajectoryRecord;
use crate::error::{domain, Result};
use crate::markov::NoiseDecomposition;
use crate::montecarlo::{LockInEstimate, TightnessReport};
use crate::odeflow::SegmentDeviation;
use crate::twotimescale::{CoupledTrajectory, TrackingSummary};

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if x != 0.0 && !(1e-6..1e16).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

/// `n, state, theta_0, ...` for every recorded iterate.
pub fn trajectory_csv<W: Write>(traj: &TrajectoryRecord, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["n".to_string(), "state".to_string()];
    header.extend((0..traj.dim).map(|i| format!("theta_{i}")));
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut row = vec![traj.indices[i].to_string(), traj.states[i].to_string()];
        row.extend(traj.theta(i).iter().map(|&x| num(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `n, zeta1_i, zeta2_i, zeta3_i, A_i, B_i, C_i, D_i` per step, with `n` the
/// index of the step's starting iterate.
pub fn decomposition_csv<W: Write>(dec: &NoiseDecomposition, n_start: u64, out: W) -> Result<()> {
    let d = dec.dim;
    let mut w = writer(out);
    let mut header = vec!["n".to_string()];
    for name in ["zeta1", "zeta2", "zeta3", "A", "B", "C", "D"] {
        header.extend((0..d).map(|i| format!("{name}_{i}")));
    }
    w.write_record(&header)?;
    for k in 0..dec.steps() {
        let mut row = vec![(n_start + k as u64).to_string()];
        for zeta in [&dec.zeta1, &dec.zeta2, &dec.zeta3] {
            row.extend(zeta[k * d..(k + 1) * d].iter().map(|&x| num(x)));
        }
        // partial sums after step k sit at position k + 1
        for sums in [&dec.a_sums, &dec.b_sums, &dec.c_sums, &dec.d_sums] {
            row.extend(sums[(k + 1) * d..(k + 2) * d].iter().map(|&x| num(x)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn rho_csv<W: Write>(devs: &[SegmentDeviation], out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record([
        "m",
        "n_m",
        "t_m",
        "rho",
        "segment_sup_norm",
        "interpolation_bound",
    ])?;
    for d in devs {
        w.write_record([
            d.m.to_string(),
            d.n_m.to_string(),
            num(d.t_m),
            num(d.rho),
            num(d.segment_sup_norm),
            num(d.interpolation_bound),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn estimate_csv<W: Write>(estimates: &[LockInEstimate], out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record([
        "n0", "R", "mode", "p_hat", "lo", "hi", "bound", "eta_conv", "horizon",
    ])?;
    for e in estimates {
        w.write_record([
            e.n0.to_string(),
            e.replications.to_string(),
            e.mode.clone(),
            num(e.p_hat),
            num(e.wilson_lo),
            num(e.wilson_hi),
            opt(e.theoretical_bound),
            num(e.eta_conv),
            e.horizon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn tracking_csv<W: Write>(
    traj: &CoupledTrajectory,
    summary: &TrackingSummary,
    out: W,
) -> Result<()> {
    if summary.errors.len() != traj.len() {
        return domain("tracking summary does not match the trajectory");
    }
    let mut w = writer(out);
    let mut header = vec!["n".to_string(), "tracking_error".to_string()];
    header.extend((0..traj.slow_dim).map(|i| format!("theta_{i}")));
    header.extend((0..traj.fast_dim).map(|i| format!("w_{i}")));
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut row = vec![traj.index(i).to_string(), num(summary.errors[i])];
        row.extend(traj.theta(i).iter().map(|&x| num(x)));
        row.extend(traj.w(i).iter().map(|&x| num(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["k", "n0", "N_prime0"])?;
    for r in &table.rows {
        w.write_record([num(r.k), num(r.n0), num(r.n_prime0)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn tightness_csv<W: Write>(report: &TightnessReport, out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record([
        "n",
        "p_in",
        "p_se",
        "mean_phi",
        "phi_se",
        "diverged_fraction",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            num(r.p_in),
            num(r.p_se),
            num(r.mean_phi),
            num(r.phi_se),
            num(r.diverged_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot with a logarithmic y axis.
#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl LinePlot {
    /// Renders an 800x600 standalone SVG. Points with `y <= 0` are dropped.
    pub fn to_svg(&self) -> Result<String> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|&(x, y)| x.is_finite() && y.is_finite() && y > 0.0)
            .collect();
        if pts.is_empty() {
            return domain("nothing to plot: no finite positive values");
        }
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y.log10());
            y1 = y1.max(y.log10());
        }
        if x1 == x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let (d0, d1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |ly: f64| TOP + (d1 - ly) / (d1 - d0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="600" viewBox="0 0 800 600" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="800" height="600" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="400" y="28" text-anchor="middle" font-size="16">{}</text>"#,
            escape(&self.title)
        );
        // decade grid lines and labels
        let step = ((d1 - d0) / 10.0).ceil().max(1.0);
        let mut e = d0;
        while e <= d1 + 1e-9 {
            let y = sy(e);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
                WIDTH - RIGHT
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                e as i64
            );
            e += step;
        }
        for i in 0..=5 {
            let xv = x0 + (x1 - x0) * i as f64 / 5.0;
            let x = sx(xv);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                HEIGHT - BOTTOM + 18.0,
                format_tick(xv)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 25.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|&&(x, y)| x.is_finite() && y.is_finite() && y > 0.0)
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y.log10())))
                .collect();
            if !path.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    path.join(" ")
                );
            }
            let ly = TOP + 16.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT - 220.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
                lx + 24.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 30.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

fn format_tick(x: f64) -> String {
    let r = (x * 1000.0).round() / 1000.0;
    format!("{r}")
}
