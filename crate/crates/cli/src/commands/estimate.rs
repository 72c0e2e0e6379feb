use lockin::bounds::lockin_lower_bound;
use lockin::montecarlo::{estimate_lockin, Conditioning, ConvergenceCriterion, LockInConfig};
use lockin::odeflow::Region;
use lockin::report;

use super::{benchmark, bound_constants, initial_state, nu, schedule};
use crate::error::CliResult;
use crate::{Context, RunInfo};

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P2")?;
    let spec = bench.single()?;
    let geom = bench.geometry()?;
    let sched = schedule(cfg, &bench)?;
    let n0s: Vec<u64> = cfg.get_list("lockin", "n0")?.unwrap_or_else(|| vec![1000]);
    let reps: usize = cfg.get_or("lockin", "reps", 500)?;
    let horizon: Option<u64> = cfg.get("lockin", "horizon")?;
    let level: f64 = cfg.get_or("lockin", "level", 0.95)?;
    let eta: f64 = cfg.get_or("lockin", "eta", geom.eps)?;
    let mode = match cfg.raw("lockin", "mode").unwrap_or("restart") {
        "restart" => Conditioning::Restart,
        "rejection" => {
            let initial = match cfg.get_list::<f64>("lockin", "initial")? {
                None => geom.b.clone(),
                Some(v) if v.len() == 2 => {
                    Region::cuboid(vec![v[0]; spec.dim], vec![v[1]; spec.dim])
                        .map_err(|e| cfg.reject("lockin", "initial", e.to_string()))?
                }
                Some(_) => return Err(cfg.reject("lockin", "initial", "initial must be 'lo, hi'")),
            };
            Conditioning::Rejection { initial }
        }
        _ => return Err(cfg.reject("lockin", "mode", "mode must be restart or rejection")),
    };
    let y0 = initial_state(cfg)?;
    let nu = nu(cfg)?;
    let inst = bound_constants(cfg, &bench)?;

    let mut estimates = Vec::with_capacity(n0s.len());
    for &n0 in &n0s {
        let s = sched.s_tail(n0, 1e-12)?;
        let bound = lockin_lower_bound(&inst.constants, s.value, nu)?;
        let n_total = horizon.unwrap_or(10 * n0);
        let lc = LockInConfig {
            n0,
            n_total,
            replications: reps,
            mode: mode.clone(),
            seed: ctx.seed,
            criterion: ConvergenceCriterion { eta, fraction: 0.9 },
            level,
            y0,
            bound: Some(bound),
        };
        let est = estimate_lockin(spec, &sched, geom, &lc)?;
        println!(
            "n0 = {n0}: p_hat = {:.4} [{:.4}, {:.4}] ({}/{} {}), bound = {bound:.4e}",
            est.p_hat, est.wilson_lo, est.wilson_hi, est.successes, est.replications, est.mode
        );
        estimates.push(est);
    }
    ctx.out.write_table("estimate", &estimates, |w| {
        report::estimate_csv(&estimates, w)
    })?;
    ctx.out.write_json("bound.json", &inst)?;
    Ok(RunInfo {
        benchmark: Some(bench.name.to_string()),
        schedule: Some(sched.literal()),
    })
}
