//! Two-timescale run, tracking error and the nested lock-in bound.
//!
//! Per-segment probabilities come from the maximal Azuma inequality with the
//! segment's square step sum; the sums past the last segment inside the
//! simulated range are replaced by a certified tail.

use lockin::bounds::{AzumaMode, BoundConstants, BoundInputs, Provenance, Tagged};
use lockin::markov::{estimate_poisson_constants, mean_field};
use lockin::odeflow::{constants_cl, HorizonOptions, Region, SegmentPartition};
use lockin::report;
use lockin::schedules::StepSchedule;
use lockin::twotimescale::{
    coupled_partition, nested_bound, simulate_coupled, tracking_error, NestedBound, NestedTails,
    SlowSteps, TwoTimescaleSpec,
};
use lockin::Error;
use serde::Serialize;

use super::{azuma_mode, benchmark};
use crate::error::{CliError, CliResult};
use crate::{Context, RunInfo};

/// The pieces of the bound constants the segment probabilities use.
#[derive(Serialize)]
struct SegmentConstants {
    dim: usize,
    l: Tagged,
    t: f64,
    k_t: f64,
    c_r: Tagged,
    c_bar: f64,
    c0: f64,
    delta_b: f64,
    azuma: AzumaMode,
}

impl SegmentConstants {
    fn of(c: &BoundConstants) -> Self {
        Self {
            dim: c.d,
            l: c.l,
            t: c.t.value,
            k_t: c.k_t,
            c_r: c.c_r,
            c_bar: c.c_bar.value,
            c0: c.c0,
            delta_b: c.delta_b,
            azuma: c.azuma_mode,
        }
    }
}

#[derive(Serialize)]
struct NestedOutput {
    n0: u64,
    /// `ok` or `vacuous`.
    status: &'static str,
    vacuous_segment: Option<usize>,
    bound: f64,
    slow: SegmentConstants,
    coupled: SegmentConstants,
    slow_boundaries: Vec<u64>,
    coupled_boundaries: Vec<u64>,
    l_map: Vec<usize>,
    slow_probs: Vec<f64>,
    coupled_probs: Vec<f64>,
    tails: NestedTails,
    detail: Option<NestedBound>,
}

#[derive(Serialize)]
struct TrackOutput {
    benchmark: String,
    slow_steps: String,
    fast_steps: String,
    n_start: u64,
    steps_taken: u64,
    diverged: bool,
    window_fraction: f64,
    window_mean: f64,
    window_max: f64,
    nested: Option<NestedOutput>,
}

fn tagged(value: f64, source: Provenance) -> Tagged {
    Tagged { value, source }
}

#[allow(clippy::too_many_arguments)]
fn segment_constants(
    l: f64,
    c: f64,
    c_r: f64,
    t: f64,
    dim: usize,
    delta_b: f64,
    tilde_c: f64,
    k: (f64, f64, f64),
    mode: AzumaMode,
) -> CliResult<BoundConstants> {
    let inputs = BoundInputs {
        l: Tagged::user(l),
        c: tagged(c, Provenance::Estimated),
        c_bar: Tagged::user(k.2),
        k: Tagged::user(k.0),
        k_prime: Tagged::user(k.1),
        c_r: Tagged::estimated(c_r),
        c_r_dprime: None,
        t: tagged(t, Provenance::Derived),
        c_hat: None,
        mode,
        d: dim,
        delta_b,
        tilde_c,
    };
    Ok(BoundConstants::derive(&inputs)?)
}

fn square_sums(sched: &StepSchedule, part: &SegmentPartition) -> CliResult<Vec<f64>> {
    part.boundaries
        .windows(2)
        .map(|w| {
            let mut acc = 0.0;
            for n in w[0]..w[1] {
                let a = sched.step(n)?;
                acc += a * a;
            }
            Ok(acc)
        })
        .collect()
}

fn nested(
    ctx: &Context,
    spec: &TwoTimescaleSpec,
    slow: &StepSchedule,
    geom: &lockin::odeflow::GeometrySpec,
    declared: &lockin::problems::DeclaredConstants,
    max_index: u64,
) -> CliResult<NestedOutput> {
    let cfg = &ctx.cfg;
    let n0: u64 = cfg.get_or("track", "n0", 10)?;
    let segments: usize = cfg.get_or("track", "segments", 10)?;
    let delta_b: f64 = cfg.get_or("track", "delta_b", geom.delta_b)?;
    let mode = azuma_mode(cfg)?;
    let opts = HorizonOptions::default();
    let (d, k) = (spec.slow_dim, spec.fast_dim);
    let l = declared
        .l
        .ok_or_else(|| CliError::Usage("benchmark declares no Lipschitz constant".into()))?;
    let growth = (declared.k, declared.k_prime, declared.c_bar);

    let h_slow = |x: &[f64], out: &mut [f64]| {
        let v = mean_field(&spec.slow_kernel, &*spec.slow_field, x, d)
            .expect("slow mean field on the benchmark");
        out.copy_from_slice(&v);
    };
    let cl = constants_cl(geom, &h_slow, spec.t_slow, Some(l), &opts)?;
    let b_grid = geom.b.grid(opts.grid_density)?;
    let c_r_slow = estimate_poisson_constants(&spec.slow_kernel, &*spec.slow_field, &b_grid)?.c_r();
    let slow_consts = segment_constants(
        l,
        cl.c,
        c_r_slow,
        spec.t_slow,
        d,
        delta_b,
        geom.b.sup_norm(),
        growth,
        mode,
    )?;

    // the fast drift lifted to (theta, w) with a zero slow component
    let fast_field = spec.fast_field.clone();
    let joint = move |x: &[f64], z: &[f64], out: &mut [f64]| {
        out[..d].iter_mut().for_each(|v| *v = 0.0);
        fast_field(&x[..d], &x[d..], z, &mut out[d..]);
    };
    let r = declared.audit_radius;
    let joint_region = Region::cuboid(vec![-r; d + k], vec![r; d + k])?;
    let joint_grid = joint_region.grid(11)?;
    let c_r_fast = estimate_poisson_constants(&spec.fast_kernel, &joint, &joint_grid)?.c_r();
    let t_c = spec.t_coupled();
    let coupled_consts = segment_constants(
        l,
        0.0,
        c_r_slow.max(c_r_fast),
        t_c,
        d + k,
        delta_b,
        joint_region.sup_norm(),
        (
            declared.k.max(spec.fast_growth),
            declared.k_prime.max(spec.fast_mart_bound),
            declared.c_bar,
        ),
        mode,
    )?;

    let part = coupled_partition(
        slow,
        &spec.fast_steps,
        n0,
        spec.t_slow,
        t_c,
        segments,
        max_index,
    )?;
    let ps: Vec<f64> = square_sums(slow, &part.slow)?
        .into_iter()
        .map(|s| slow_consts.segment_probability(s))
        .collect();
    let pc: Vec<f64> = square_sums(&spec.fast_steps, &part.coupled)?
        .into_iter()
        .map(|s| coupled_consts.segment_probability(s))
        .collect();
    let slow_end = *part.slow.boundaries.last().unwrap();
    let coupled_end = *part.coupled.boundaries.last().unwrap();
    let tails = NestedTails {
        slow: slow_consts.segment_tail_bound(slow.s_tail(slow_end, 1e-12)?.value),
        coupled: coupled_consts
            .segment_tail_bound(spec.fast_steps.s_tail(coupled_end, 1e-12)?.value),
    };

    let saturated = ps
        .iter()
        .position(|&p| p >= 1.0)
        .or_else(|| pc.iter().position(|&p| p >= 1.0));
    let (status, vacuous_segment, bound, detail) = match saturated {
        Some(seg) => ("vacuous", Some(seg), 0.0, None),
        None => match nested_bound(&ps, &pc, &part.l_map, tails) {
            Ok(nb) => ("ok", None, nb.bound, Some(nb)),
            Err(Error::VacuousBound { segment }) => ("vacuous", Some(segment), 0.0, None),
            Err(e) => return Err(e.into()),
        },
    };
    Ok(NestedOutput {
        n0,
        status,
        vacuous_segment,
        bound,
        slow: SegmentConstants::of(&slow_consts),
        coupled: SegmentConstants::of(&coupled_consts),
        slow_boundaries: part.slow.boundaries.clone(),
        coupled_boundaries: part.coupled.boundaries.clone(),
        l_map: part.l_map.clone(),
        slow_probs: ps,
        coupled_probs: pc,
        tails,
        detail,
    })
}

#[derive(Serialize)]
struct TrackingRow {
    n: u64,
    tracking_error: f64,
    theta: Vec<f64>,
    w: Vec<f64>,
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let bench = benchmark(cfg, "P3")?;
    let spec = bench.coupled()?;
    let geom = bench.geometry()?;
    let steps: u64 = cfg.get_or("track", "steps", 100_000)?;
    let window: f64 = cfg.get_or("track", "window", 0.1)?;
    let (d, k) = (spec.slow_dim, spec.fast_dim);
    if bench.theta0.len() != d + k {
        return Err(CliError::Usage(
            "initial point does not match (theta, w)".into(),
        ));
    }
    let n_start = match &spec.slow_steps {
        SlowSteps::Schedule(s) => s.offset(),
        SlowSteps::Frozen => 0,
    }
    .max(spec.fast_steps.offset());
    let traj = simulate_coupled(
        spec,
        &bench.theta0[..d],
        &bench.theta0[d..],
        (0, 0),
        n_start,
        steps,
        ctx.seed,
    )?;
    let summary = tracking_error(&traj, &spec.lambda, window)
        .map_err(|e| cfg.reject("track", "window", e.to_string()))?;
    let rows: Vec<TrackingRow> = match ctx.out.format {
        crate::output::Format::Json => (0..traj.len())
            .map(|i| TrackingRow {
                n: traj.index(i),
                tracking_error: summary.errors[i],
                theta: traj.theta(i).to_vec(),
                w: traj.w(i).to_vec(),
            })
            .collect(),
        crate::output::Format::Csv => Vec::new(),
    };
    ctx.out.write_table("tracking", &rows, |w| {
        report::tracking_csv(&traj, &summary, w)
    })?;
    println!(
        "{}: {} steps, trailing {:.0}% tracking error mean {:.4e}, max {:.4e}{}",
        bench.name,
        traj.steps_taken,
        100.0 * window,
        summary.window_mean,
        summary.window_max,
        if traj.diverged { " (diverged)" } else { "" }
    );

    let nested = match &spec.slow_steps {
        SlowSteps::Schedule(slow) => {
            let out = nested(ctx, spec, slow, geom, &bench.constants, n_start + steps)?;
            match out.status {
                "ok" => println!(
                    "nested lock-in bound from n0 = {}: {:.6}",
                    out.n0, out.bound
                ),
                _ => println!(
                    "nested lock-in bound from n0 = {}: vacuous at segment {}",
                    out.n0,
                    out.vacuous_segment.unwrap_or(0)
                ),
            }
            Some(out)
        }
        SlowSteps::Frozen => None,
    };
    let out = TrackOutput {
        benchmark: bench.name.to_string(),
        slow_steps: spec.slow_steps.literal(),
        fast_steps: spec.fast_steps.literal(),
        n_start,
        steps_taken: traj.steps_taken,
        diverged: traj.diverged,
        window_fraction: window,
        window_mean: summary.window_mean,
        window_max: summary.window_max,
        nested,
    };
    ctx.out.write_json("track.json", &out)?;
    Ok(RunInfo {
        benchmark: Some(out.benchmark),
        schedule: Some(format!("{} / {}", out.slow_steps, out.fast_steps)),
    })
}
