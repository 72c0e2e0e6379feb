use lockin::bounds::{bound_report, BoundReport};
use lockin::schedules::{summability_certificate, CertificateReport};
use serde::Serialize;

use super::{benchmark, bound_constants, nu, schedule, Instantiated};
use crate::error::CliResult;
use crate::{Context, RunInfo};

#[derive(Serialize)]
struct BoundsOutput {
    benchmark: String,
    schedule: String,
    instantiated: Instantiated,
    report: Option<BoundReport>,
    /// Why the thresholds or the bound could not be evaluated.
    report_error: Option<String>,
    /// Finiteness of `sum_n 4d exp(-K_hat delta^2 / (d s(n)))`.
    summability: Option<CertificateReport>,
    summability_error: Option<String>,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P1")?;
    let sched = schedule(cfg, &bench)?;
    let inst = bound_constants(cfg, &bench)?;
    let nu = nu(cfg)?;
    let report = bound_report(&inst.constants, &sched, nu);
    let c = &inst.constants;
    let d = c.d as f64;
    let exponent = c.k_hat * c.delta_b * c.delta_b / d;
    let (summability, summability_error) =
        match summability_certificate(&sched, exponent, c.d, sched.offset()) {
            Ok(cert) => (Some(cert), None),
            Err(e) => (None, Some(e.to_string())),
        };

    println!(
        "{}: T = {:.4}, K_T = {:.4e}, C0 = {:.4}, K_hat = {:.4e}{}",
        bench.name,
        c.t.value,
        c.k_t,
        c.c0,
        c.k_hat,
        if c.c_hat_calibrated {
            ""
        } else {
            " (C_hat defaults to K_hat, uncalibrated)"
        }
    );
    if let Ok(report) = &report {
        let th = &report.thresholds;
        println!(
            "thresholds: n0_1 = {}, n0_2 = {}, n0_3 = {}, n0 = {}",
            th.n0_1, th.n0_2, th.n0_3, th.n0
        );
        println!(
            "s(n0) = {:.6e}, lock-in lower bound = {:.6}",
            report.s_n0, report.lockin_lower_bound
        );
    }
    let (report, failure) = match report {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    let out = BoundsOutput {
        benchmark: bench.name.to_string(),
        schedule: sched.literal(),
        instantiated: inst,
        report,
        report_error: failure.as_ref().map(|e| e.to_string()),
        summability,
        summability_error,
    };
    ctx.out.write_json("bounds.json", &out)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(RunInfo {
        benchmark: Some(out.benchmark),
        schedule: Some(out.schedule),
    })
}
