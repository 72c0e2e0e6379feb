//! Monte Carlo estimates: lock-in probability conditioned on `theta_{n0} in B`,
//! tightness diagnostics and Wilson intervals.
//!
//! Every replication owns the stream `replication_stream(seed, i)` and results
//! are reduced in replication order, so the thread count never changes an
//! estimate.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::{drive, initial_state, InitialState, ProblemSpec};
use crate::error::{domain, Error, Result};
use crate::numeric::norm2;
use crate::odeflow::{GeometrySpec, Region};
use crate::rng::{replication_seed, stream};
use crate::schedules::StepSchedule;

/// Wilson score interval, clamped to `[0, 1]`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return domain("Wilson interval needs at least one trial");
    }
    if successes > trials {
        return domain("more successes than trials");
    }
    if !(z >= 0.0 && z.is_finite()) {
        return domain("z must be finite and nonnegative");
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = (center - half).clamp(0.0, 1.0).min(p);
    let hi = (center + half).clamp(0.0, 1.0).max(p);
    Ok((lo, hi))
}

/// Two-sided normal quantile for a confidence level in `(0, 1)`.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return domain(format!("confidence level {level} outside (0, 1)"));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// How `theta_{n0} in B` is imposed.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// `theta_{n0}` uniform on `B`, steps start at `n0`.
    Restart,
    /// Start at the schedule offset with `theta` uniform on `initial`, keep
    /// paths that are in `B` at `n0`.
    Rejection { initial: Region },
}

impl Conditioning {
    pub fn label(&self) -> &'static str {
        match self {
            Conditioning::Restart => "restart",
            Conditioning::Rejection { .. } => "rejection",
        }
    }
}

/// Finite-horizon stand-in for convergence to `H`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvergenceCriterion {
    /// Allowed distance to `H`.
    pub eta: f64,
    /// Iterates with `n >= fraction * n_total` must all be within `eta`.
    pub fraction: f64,
}

impl ConvergenceCriterion {
    pub fn for_geometry(geom: &GeometrySpec) -> Self {
        Self {
            eta: geom.eps,
            fraction: 0.9,
        }
    }

    fn window_start(&self, n_total: u64) -> u64 {
        (self.fraction * n_total as f64).ceil() as u64
    }
}

#[derive(Debug, Clone)]
pub struct LockInConfig {
    pub n0: u64,
    /// Index of the last iterate.
    pub n_total: u64,
    pub replications: usize,
    pub mode: Conditioning,
    pub seed: u64,
    pub criterion: ConvergenceCriterion,
    pub level: f64,
    pub y0: InitialState,
    /// Theoretical lower bound to report alongside.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LockInEstimate {
    pub n0: u64,
    pub replications: usize,
    pub successes: usize,
    pub mode: String,
    pub attempts: usize,
    pub acceptance_rate: Option<f64>,
    pub diverged: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub level: f64,
    pub theoretical_bound: Option<f64>,
    pub seed: u64,
    pub eta_conv: f64,
    pub horizon: u64,
}

#[derive(Debug, Clone, Copy)]
struct PathResult {
    accepted: bool,
    success: bool,
    diverged: bool,
}

fn run_path(
    spec: &ProblemSpec,
    sched: &StepSchedule,
    geom: &GeometrySpec,
    cfg: &LockInConfig,
    seed: u64,
) -> Result<PathResult> {
    let mut rng = stream(seed);
    let (mut theta, mut state, start) = match &cfg.mode {
        Conditioning::Restart => {
            let theta = geom.b.sample_uniform(&mut rng);
            let state = initial_state(&spec.kernel, &theta, cfg.y0, &mut rng)?;
            (theta, state, cfg.n0)
        }
        Conditioning::Rejection { initial } => {
            let mut theta = initial.sample_uniform(&mut rng);
            let mut state = initial_state(&spec.kernel, &theta, cfg.y0, &mut rng)?;
            let offset = sched.offset();
            let out = drive(
                spec,
                sched,
                &mut theta,
                &mut state,
                offset,
                cfg.n0 - offset,
                &mut rng,
                |_| true,
            )?;
            if out.diverged || !geom.b.contains(&theta) {
                return Ok(PathResult {
                    accepted: false,
                    success: false,
                    diverged: out.diverged,
                });
            }
            (theta, state, cfg.n0)
        }
    };
    let window = cfg.criterion.window_start(cfg.n_total);
    let eta = cfg.criterion.eta;
    let mut ok = !(start >= window && geom.dist_to_h(&theta) > eta);
    if !ok {
        return Ok(PathResult {
            accepted: true,
            success: false,
            diverged: false,
        });
    }
    let out = drive(
        spec,
        sched,
        &mut theta,
        &mut state,
        start,
        cfg.n_total - start,
        &mut rng,
        |ev| {
            if ev.n >= window && geom.dist_to_h(ev.theta) > eta {
                ok = false;
                return false;
            }
            true
        },
    )?;
    Ok(PathResult {
        accepted: true,
        success: ok && !out.diverged,
        diverged: out.diverged,
    })
}

/// Estimates `P(theta_n stays within eta of H late in the run | theta_{n0} in B)`.
pub fn estimate_lockin(
    spec: &ProblemSpec,
    sched: &StepSchedule,
    geom: &GeometrySpec,
    cfg: &LockInConfig,
) -> Result<LockInEstimate> {
    if cfg.replications == 0 {
        return domain("need at least one replication");
    }
    if cfg.n_total <= cfg.n0 {
        return domain(format!(
            "horizon {} must exceed n0 = {}",
            cfg.n_total, cfg.n0
        ));
    }
    if cfg.n0 < sched.offset() {
        return domain("n0 below schedule offset");
    }
    if let Conditioning::Rejection { initial } = &cfg.mode {
        if !initial.is_bounded() || initial.dim() != spec.dim {
            return domain("rejection initial region must be bounded and match the dimension");
        }
    }
    if geom.dim() != spec.dim {
        return domain("geometry and problem dimensions differ");
    }
    let z = z_for_level(cfg.level)?;
    let r = cfg.replications;

    let (results, attempts) = match cfg.mode {
        Conditioning::Restart => {
            let res: Vec<PathResult> = (0..r)
                .into_par_iter()
                .map(|i| run_path(spec, sched, geom, cfg, replication_seed(cfg.seed, i as u64)))
                .collect::<Result<_>>()?;
            (res, r)
        }
        Conditioning::Rejection { .. } => {
            let budget = r * 50;
            let mut accepted = Vec::with_capacity(r);
            let mut used = 0usize;
            while accepted.len() < r && used < budget {
                let batch = (2 * (r - accepted.len())).max(64).min(budget - used);
                let res: Vec<PathResult> = (used..used + batch)
                    .into_par_iter()
                    .map(|i| run_path(spec, sched, geom, cfg, replication_seed(cfg.seed, i as u64)))
                    .collect::<Result<_>>()?;
                let mut consumed = batch;
                for (j, p) in res.into_iter().enumerate() {
                    if p.accepted {
                        accepted.push(p);
                        if accepted.len() == r {
                            consumed = j + 1;
                            break;
                        }
                    }
                }
                used += consumed;
            }
            if accepted.is_empty() {
                return Err(Error::ConditioningInfeasible { attempts: used });
            }
            (accepted, used)
        }
    };
    let kept = results.len();
    let successes = results.iter().filter(|p| p.success).count();
    let diverged = results.iter().filter(|p| p.diverged).count();
    let (lo, hi) = wilson_interval(successes as u64, kept as u64, z)?;
    Ok(LockInEstimate {
        n0: cfg.n0,
        replications: kept,
        successes,
        mode: cfg.mode.label().into(),
        attempts,
        acceptance_rate: match cfg.mode {
            Conditioning::Restart => None,
            Conditioning::Rejection { .. } => Some(kept as f64 / attempts as f64),
        },
        diverged,
        p_hat: successes as f64 / kept as f64,
        wilson_lo: lo,
        wilson_hi: hi,
        level: cfg.level,
        theoretical_bound: cfg.bound,
        seed: cfg.seed,
        eta_conv: cfg.criterion.eta,
        horizon: cfg.n_total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessRow {
    pub n: u64,
    /// Fraction of paths with `theta_n` in the compact set.
    pub p_in: f64,
    pub p_se: f64,
    /// Mean of `phi(theta_n)` over paths that have not diverged.
    pub mean_phi: f64,
    pub phi_se: f64,
    pub diverged_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    /// Least-squares slope of `ln(mean phi)` against `ln n`.
    pub phi_log_slope: f64,
    /// Fraction of all steps spent inside the compact set: an occupancy
    /// proxy, not the conditional probabilities themselves.
    pub occupancy_proxy: f64,
    pub tightness_failure: bool,
}

/// Estimates `P(theta_n in K)` and `E[phi(theta_n)]` on `n_grid`.
#[allow(clippy::too_many_arguments)]
pub fn tightness_diagnostics<P>(
    spec: &ProblemSpec,
    sched: &StepSchedule,
    phi: &P,
    compact: &Region,
    theta0: &[f64],
    n_grid: &[u64],
    replications: usize,
    seed: u64,
) -> Result<TightnessReport>
where
    P: Fn(&[f64]) -> f64 + Sync,
{
    if replications == 0 {
        return domain("need at least one replication");
    }
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return domain("n grid must be nonempty and strictly increasing");
    }
    let start = sched.offset();
    if n_grid[0] < start {
        return domain("n grid starts below the schedule offset");
    }
    let last = *n_grid.last().unwrap();
    let g = n_grid.len();

    // per path: phi at each grid point (None after divergence), in-set flags, occupancy
    type PathRow = (Vec<Option<f64>>, Vec<bool>, f64);
    let paths: Vec<PathRow> = (0..replications)
        .into_par_iter()
        .map(|i| -> Result<PathRow> {
            let mut rng = stream(replication_seed(seed, i as u64));
            let mut theta = theta0.to_vec();
            let mut state = 0usize;
            let mut phis = vec![None; g];
            let mut inside = vec![false; g];
            let mut next = 0usize;
            let mut occupied = 0u64;
            let record = |n: u64,
                          th: &[f64],
                          next: &mut usize,
                          phis: &mut Vec<Option<f64>>,
                          inside: &mut Vec<bool>| {
                while *next < g && n_grid[*next] == n {
                    phis[*next] = Some(phi(th));
                    inside[*next] = compact.contains(th);
                    *next += 1;
                }
            };
            record(start, &theta, &mut next, &mut phis, &mut inside);
            if compact.contains(&theta) {
                occupied += 1;
            }
            let out = drive(
                spec,
                sched,
                &mut theta,
                &mut state,
                start,
                last - start,
                &mut rng,
                |ev| {
                    if compact.contains(ev.theta) {
                        occupied += 1;
                    }
                    record(ev.n, ev.theta, &mut next, &mut phis, &mut inside);
                    true
                },
            )?;
            let total = out.steps_taken + 1;
            Ok((
                phis,
                inside,
                occupied as f64 / (last - start + 1).max(total) as f64,
            ))
        })
        .collect::<Result<_>>()?;

    let r = replications as f64;
    let mut rows = Vec::with_capacity(g);
    for (j, &n) in n_grid.iter().enumerate() {
        let hits = paths.iter().filter(|p| p.1[j]).count() as f64;
        let alive: Vec<f64> = paths.iter().filter_map(|p| p.0[j]).collect();
        let p_in = hits / r;
        let m = alive.len() as f64;
        let (mean, se) = if alive.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mean = alive.iter().sum::<f64>() / m;
            let var = if alive.len() > 1 {
                alive.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            (mean, (var / m).sqrt())
        };
        rows.push(TightnessRow {
            n,
            p_in,
            p_se: (p_in * (1.0 - p_in) / r).sqrt(),
            mean_phi: mean,
            phi_se: se,
            diverged_fraction: 1.0 - m / r,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|row| row.mean_phi > 0.0 && row.mean_phi.is_finite())
        .map(|row| ((row.n as f64).ln(), row.mean_phi.ln()))
        .collect();
    let phi_log_slope = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    let first = &rows[0];
    let end = rows.last().unwrap();
    let grows = g >= 2
        && phi_log_slope > 0.0
        && (end.mean_phi - first.mean_phi) > 3.0 * (end.phi_se.hypot(first.phi_se)).max(1e-300);
    let tightness_failure = end.diverged_fraction > 0.5 || end.mean_phi.is_nan() || grows;
    let occupancy_proxy = paths.iter().map(|p| p.2).sum::<f64>() / r;
    Ok(TightnessReport {
        rows,
        phi_log_slope,
        occupancy_proxy,
        tightness_failure,
    })
}

/// `|theta|^2`, the default tightness test function.
pub fn squared_norm(theta: &[f64]) -> f64 {
    let n = norm2(theta);
    n * n
}
