use lockin::engine::{simulate, RunSetup, SimOptions};
use lockin::markov::{decompose, solve_poisson};
use lockin::report;
use serde::Serialize;

use super::{benchmark, initial_state, schedule};
use crate::error::{CliError, CliResult};
use crate::{Context, RunInfo};

/// Pathwise tolerance for the decomposition identity and the conditional mean.
const IDENTITY_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Serialize)]
struct PointCheck {
    theta: Vec<f64>,
    residual: f64,
    normalization: f64,
    stationary_residual: f64,
    h: Vec<f64>,
}

#[derive(Serialize)]
struct PoissonOutput {
    benchmark: String,
    steps: usize,
    max_reconstruction_error: f64,
    max_conditional_mean: f64,
    max_poisson_residual: f64,
    initial: PointCheck,
    last: PointCheck,
    identity_tolerance: f64,
    residual_tolerance: f64,
    passed: bool,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P1")?;
    let spec = bench.single()?;
    let sched = schedule(cfg, &bench)?;
    let steps: u64 = cfg.get_or("poisson", "steps", 10_000)?;
    let setup = RunSetup::new(bench.theta0.clone(), sched.offset(), steps)
        .with_initial_state(initial_state(cfg)?);
    let traj = simulate(spec, &sched, &setup, ctx.seed, &SimOptions::default())?;
    let dec = decompose(&traj, &spec.kernel, &*spec.f, &sched)?;
    let point = |theta: &[f64]| -> CliResult<PointCheck> {
        let sol = solve_poisson(&spec.kernel, &*spec.f, theta, spec.dim)?;
        Ok(PointCheck {
            theta: theta.to_vec(),
            residual: sol.residual,
            normalization: sol.normalization,
            stationary_residual: sol.stationary_residual,
            h: sol.h,
        })
    };
    let initial = point(traj.theta(0))?;
    let last = point(traj.last_theta())?;
    let passed = dec.max_reconstruction_error <= IDENTITY_TOL
        && dec.max_conditional_mean <= IDENTITY_TOL
        && dec.max_poisson_residual <= RESIDUAL_TOL
        && initial.normalization <= RESIDUAL_TOL
        && last.normalization <= RESIDUAL_TOL;

    ctx.out.write_table("decomposition", &dec, |w| {
        report::decomposition_csv(&dec, traj.n_start, w)
    })?;
    let out = PoissonOutput {
        benchmark: bench.name.to_string(),
        steps: dec.steps(),
        max_reconstruction_error: dec.max_reconstruction_error,
        max_conditional_mean: dec.max_conditional_mean,
        max_poisson_residual: dec.max_poisson_residual,
        initial,
        last,
        identity_tolerance: IDENTITY_TOL,
        residual_tolerance: RESIDUAL_TOL,
        passed,
    };
    ctx.out.write_json("poisson.json", &out)?;
    println!(
        "{}: {} steps, identity error {:.3e}, conditional mean {:.3e}, Poisson residual {:.3e}",
        out.benchmark,
        out.steps,
        out.max_reconstruction_error,
        out.max_conditional_mean,
        out.max_poisson_residual
    );
    if !passed {
        return Err(CliError::Numeric(
            "Poisson residual or decomposition identity outside tolerance".into(),
        ));
    }
    Ok(RunInfo {
        benchmark: Some(out.benchmark),
        schedule: Some(sched.literal()),
    })
}
