use lockin::engine::{simulate, sup_norm_monitor, GronwallCheck, RunSetup, SimOptions};
use lockin::numeric::norm2;
use lockin::odeflow::{horizon_t, partition, rho_deviations, HorizonOptions};
use lockin::report;
use serde::Serialize;

use super::{benchmark, initial_state, schedule};
use crate::error::CliResult;
use crate::{Context, RunInfo};

#[derive(Serialize)]
struct GronwallReport {
    k_tilde: f64,
    theta0_norm: f64,
    steps_taken: u64,
    diverged: bool,
    check: GronwallCheck,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P1")?;
    let spec = bench.single()?;
    let sched = schedule(cfg, &bench)?;
    let steps: u64 = cfg.get_or("simulate", "steps", 1000)?;
    let n_start: u64 = cfg.get_or("simulate", "n_start", sched.offset())?;
    let theta0 = cfg
        .get_list::<f64>("simulate", "theta0")?
        .unwrap_or_else(|| bench.theta0.clone());
    if theta0.len() != spec.dim {
        return Err(cfg.reject(
            "simulate",
            "theta0",
            format!("theta0 needs {} coordinates", spec.dim),
        ));
    }
    let stride: usize = cfg.get_or("simulate", "stride", 1)?;
    let segments: usize = cfg.get_or("simulate", "segments", 0)?;
    let dt: f64 = cfg.get_or("simulate", "dt", 1e-3)?;
    let setup = RunSetup::new(theta0, n_start, steps).with_initial_state(initial_state(cfg)?);
    let opts = SimOptions {
        stride,
        record_increments: false,
    };
    let traj = simulate(spec, &sched, &setup, ctx.seed, &opts)?;
    let k_tilde = spec.k_tilde();
    let check = sup_norm_monitor(&traj, &sched, k_tilde)?;

    ctx.out
        .write_table("trajectory", &traj, |w| report::trajectory_csv(&traj, w))?;
    println!(
        "{}: {} steps from n = {n_start}, final theta = {:?}{}",
        bench.name,
        traj.steps_taken,
        traj.last_theta(),
        if traj.diverged { " (diverged)" } else { "" }
    );
    println!(
        "gronwall envelope (K~ = {k_tilde}): {} with max ratio {:.3e}",
        if check.holds { "holds" } else { "violated" },
        check.max_ratio
    );
    let gronwall = GronwallReport {
        k_tilde,
        theta0_norm: norm2(traj.theta(0)),
        steps_taken: traj.steps_taken,
        diverged: traj.diverged,
        check,
    };
    ctx.out.write_json("gronwall.json", &gronwall)?;

    if segments > 0 {
        let geom = bench.geometry()?;
        let h = |x: &[f64], out: &mut [f64]| {
            let v = spec.mean_field(x).expect("mean field on the benchmark");
            out.copy_from_slice(&v);
        };
        let t = match cfg.get::<f64>("constants", "T")? {
            Some(t) => t,
            None => horizon_t(geom, &h, &HorizonOptions::default())?.t,
        };
        let part = partition(&sched, n_start, t, segments)?;
        let lc = match (
            cfg.get::<f64>("constants", "L")?,
            cfg.get::<f64>("constants", "C")?,
        ) {
            (Some(l), Some(c)) => Some((l, c)),
            _ => None,
        };
        let devs = rho_deviations(&traj, &part, &sched, &h, dt, lc)?;
        ctx.out
            .write_table("rho", &devs, |w| report::rho_csv(&devs, w))?;
        let worst = devs.iter().map(|d| d.rho).fold(0.0, f64::max);
        println!(
            "segment deviations: {} segments of T = {t:.4}, max rho = {worst:.3e}",
            devs.len()
        );
    }
    Ok(RunInfo {
        benchmark: Some(bench.name.to_string()),
        schedule: Some(sched.literal()),
    })
}
