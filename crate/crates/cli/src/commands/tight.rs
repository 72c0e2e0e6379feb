use lockin::bounds::{tightness_series, SeriesReport};
use lockin::montecarlo::{squared_norm, tightness_diagnostics};
use lockin::numeric::norm2;
use lockin::odeflow::Region;
use lockin::report;
use lockin::Error;
use serde::Serialize;

use super::{benchmark, schedule};
use crate::error::CliResult;
use crate::{Context, RunInfo};

#[derive(Serialize)]
struct SeriesOutput {
    schedule: String,
    /// `finite` or `diverges`.
    status: &'static str,
    report: Option<SeriesReport>,
    reason: Option<String>,
    k_tilde: f64,
    theta0_norm: f64,
    c: f64,
    phi_log_slope: f64,
    occupancy_proxy: f64,
    tightness_failure: bool,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P1")?;
    let spec = bench.single()?;
    let sched = schedule(cfg, &bench)?;
    let reps: usize = cfg.get_or("tight", "reps", 200)?;
    let grid: Vec<u64> = cfg
        .get_list("tight", "n_grid")?
        .unwrap_or_else(|| vec![10, 100, 1000, 10_000]);
    let radius: f64 = cfg.get_or("tight", "radius", bench.constants.audit_radius)?;
    let n_max: u64 = cfg.get_or("tight", "n_max", 10_000_000)?;
    let tol: f64 = cfg.get_or("tight", "tol", 1e-6)?;
    let c: f64 = cfg.get_or("tight", "c", 1.0)?;
    let compact = Region::ball(vec![0.0; spec.dim], radius)
        .map_err(|e| cfg.reject("tight", "radius", e.to_string()))?;

    let diag = tightness_diagnostics(
        spec,
        &sched,
        &squared_norm,
        &compact,
        &bench.theta0,
        &grid,
        reps,
        ctx.seed,
    )?;
    ctx.out
        .write_table("tightness", &diag, |w| report::tightness_csv(&diag, w))?;
    for row in &diag.rows {
        println!(
            "n = {}: P(in K) = {:.4} +- {:.4}, E|theta|^2 = {:.4e}, diverged {:.4}",
            row.n, row.p_in, row.p_se, row.mean_phi, row.diverged_fraction
        );
    }
    println!(
        "occupancy proxy {:.4}, log-slope of E|theta|^2 {:.3}{}",
        diag.occupancy_proxy,
        diag.phi_log_slope,
        if diag.tightness_failure {
            ", tightness failure flagged"
        } else {
            ""
        }
    );

    let k_tilde = spec.k_tilde();
    let theta0_norm = norm2(&bench.theta0);
    let (status, report, reason) =
        match tightness_series(&sched, k_tilde, theta0_norm, c, n_max, tol) {
            Ok(r) => ("finite", Some(r), None),
            Err(Error::SeriesDiverges(msg)) => ("diverges", None, Some(msg)),
            Err(e) => return Err(e.into()),
        };
    match &report {
        Some(r) => println!(
            "tightness series: {:.6e} + tail {:.3e}",
            r.partial_sum, r.tail_bound
        ),
        None => println!("tightness series: diverges for {}", sched.literal()),
    }
    let out = SeriesOutput {
        schedule: sched.literal(),
        status,
        report,
        reason,
        k_tilde,
        theta0_norm,
        c,
        phi_log_slope: diag.phi_log_slope,
        occupancy_proxy: diag.occupancy_proxy,
        tightness_failure: diag.tightness_failure,
    };
    ctx.out.write_json("series.json", &out)?;
    Ok(RunInfo {
        benchmark: Some(bench.name.to_string()),
        schedule: Some(out.schedule),
    })
}
