//! Coupled fast/slow recursions
//!
//! ```text
//! theta_{n+1} = theta_n + a(n) [h(theta_n, Z1_n) + M1_{n+1}]
//! w_{n+1}     = w_n     + b(n) [g(theta_n, w_n, Z2_n) + M2_{n+1}]
//! ```
//!
//! with `Z1` driven by a kernel in `theta` and `Z2` by a kernel in
//! `(theta, w)`, plus tracking error, the coupled segmentation and the nested
//! lock-in bound evaluated on concrete per-segment probabilities.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::engine::{FieldFn, MartingaleFn, DIVERGENCE_NORM};
use crate::error::{domain, Error, Result};
use crate::markov::KernelFamily;
use crate::numeric::{dist2, CompensatedSum};
use crate::odeflow::SegmentPartition;
use crate::rng::stream;
use crate::schedules::StepSchedule;

/// `h(theta, z, out)` for the slow variable.
pub type SlowFieldFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `g(theta, w, z, out)` for the fast variable.
pub type FastFieldFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Slow step sizes: a schedule, or `a = 0` with `theta` held fixed.
#[derive(Debug, Clone)]
pub enum SlowSteps {
    Frozen,
    Schedule(StepSchedule),
}

impl SlowSteps {
    fn step(&self, n: u64) -> Result<f64> {
        match self {
            SlowSteps::Frozen => Ok(0.0),
            SlowSteps::Schedule(s) => s.step(n),
        }
    }

    fn offset(&self) -> u64 {
        match self {
            SlowSteps::Frozen => 0,
            SlowSteps::Schedule(s) => s.offset(),
        }
    }

    pub fn literal(&self) -> String {
        match self {
            SlowSteps::Frozen => "frozen".into(),
            SlowSteps::Schedule(s) => s.literal(),
        }
    }
}

#[derive(Clone)]
pub struct TwoTimescaleSpec {
    pub slow_dim: usize,
    pub fast_dim: usize,
    pub slow_field: SlowFieldFn,
    pub slow_kernel: KernelFamily,
    pub slow_mart: Option<MartingaleFn>,
    pub fast_field: FastFieldFn,
    /// Parameterised by `(theta, w)` concatenated.
    pub fast_kernel: KernelFamily,
    /// Receives `(theta, w)` concatenated.
    pub fast_mart: Option<MartingaleFn>,
    pub lambda: FieldFn,
    pub slow_steps: SlowSteps,
    pub fast_steps: StepSchedule,
    /// `K1`: growth of `g`.
    pub fast_growth: f64,
    /// `K2`: bound on `M2`.
    pub fast_mart_bound: f64,
    pub t_slow: f64,
    pub t_fast: f64,
}

impl fmt::Debug for TwoTimescaleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoTimescaleSpec")
            .field("slow_dim", &self.slow_dim)
            .field("fast_dim", &self.fast_dim)
            .field("slow_steps", &self.slow_steps)
            .field("fast_steps", &self.fast_steps)
            .field("t_slow", &self.t_slow)
            .field("t_fast", &self.t_fast)
            .finish()
    }
}

/// Result of the step-ratio and `lambda` audits.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledAudit {
    pub checked_up_to: u64,
    pub max_ratio: f64,
    pub final_ratio: f64,
    pub lambda_lipschitz_estimate: f64,
}

impl TwoTimescaleSpec {
    /// `T^c = max(T^f, T^s + 1)`.
    pub fn t_coupled(&self) -> f64 {
        self.t_fast.max(self.t_slow + 1.0)
    }

    fn lambda_at(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.fast_dim];
        (self.lambda)(theta, &mut out);
        out
    }

    /// Checks `a(n) < b(n)` with a shrinking ratio on `[from, up_to]` and
    /// estimates the Lipschitz constant of `lambda` on `samples`.
    pub fn audit(&self, from: u64, up_to: u64, samples: &[Vec<f64>]) -> Result<CoupledAudit> {
        let start = self
            .slow_steps
            .offset()
            .max(self.fast_steps.offset())
            .max(from);
        if up_to <= start {
            return domain("audit range is empty");
        }
        let mut max_ratio = 0.0_f64;
        let mut checkpoints = Vec::new();
        let mut n = start;
        while n <= up_to {
            let a = self.slow_steps.step(n)?;
            let b = self.fast_steps.step(n)?;
            if !(b > 0.0) || a >= b {
                return domain(format!(
                    "slow step a({n}) = {a} is not below fast step b({n}) = {b}"
                ));
            }
            let r = a / b;
            max_ratio = max_ratio.max(r);
            checkpoints.push(r);
            n = if n < 16 { n + 1 } else { n + n / 4 };
        }
        let final_ratio = *checkpoints.last().unwrap();
        if checkpoints.len() >= 2 && final_ratio > checkpoints[0] && final_ratio > 0.0 {
            return domain("step ratio a(n)/b(n) does not shrink on the audited range");
        }
        let mut lip = 0.0_f64;
        for (i, p) in samples.iter().enumerate() {
            for q in &samples[i + 1..] {
                let dx = dist2(p, q);
                if dx > 0.0 {
                    lip = lip.max(dist2(&self.lambda_at(p), &self.lambda_at(q)) / dx);
                }
            }
        }
        Ok(CoupledAudit {
            checked_up_to: up_to,
            max_ratio,
            final_ratio,
            lambda_lipschitz_estimate: lip,
        })
    }
}

/// One coupled path, all arrays flattened per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledTrajectory {
    pub slow_dim: usize,
    pub fast_dim: usize,
    pub n_start: u64,
    pub seed: u64,
    pub thetas: Vec<f64>,
    pub ws: Vec<f64>,
    pub slow_states: Vec<usize>,
    pub fast_states: Vec<usize>,
    pub slow_increments: Vec<f64>,
    pub fast_increments: Vec<f64>,
    /// `(a(n)/b(n)) h(theta_n, Z1_n)`, the slow drift seen on the fast clock.
    pub coupled_residual: Vec<f64>,
    pub steps_taken: u64,
    pub diverged: bool,
}

impl CoupledTrajectory {
    pub fn len(&self) -> usize {
        self.slow_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slow_states.is_empty()
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.slow_dim..(i + 1) * self.slow_dim]
    }

    pub fn w(&self, i: usize) -> &[f64] {
        &self.ws[i * self.fast_dim..(i + 1) * self.fast_dim]
    }

    pub fn index(&self, i: usize) -> u64 {
        self.n_start + i as u64
    }
}

/// Runs both recursions for `n_steps` steps from index `n_start`.
///
/// Per step the stream is consumed in the order `M1`, `M2`, `Z1`, `Z2`; an
/// absent martingale or a one-state chain draws nothing.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    spec: &TwoTimescaleSpec,
    theta0: &[f64],
    w0: &[f64],
    z0: (usize, usize),
    n_start: u64,
    n_steps: u64,
    seed: u64,
) -> Result<CoupledTrajectory> {
    let (d, k) = (spec.slow_dim, spec.fast_dim);
    if theta0.len() != d || w0.len() != k {
        return domain("initial point has the wrong dimension");
    }
    if z0.0 >= spec.slow_kernel.state_count() || z0.1 >= spec.fast_kernel.state_count() {
        return domain("initial chain state out of range");
    }
    if n_start < spec.slow_steps.offset() || n_start < spec.fast_steps.offset() {
        return domain("start index below a schedule offset");
    }
    let mut rng = stream(seed);
    let mut theta = theta0.to_vec();
    let mut w = w0.to_vec();
    let (mut z1, mut z2) = z0;
    let cap = n_steps.min(1 << 24) as usize + 1;
    let mut tr = CoupledTrajectory {
        slow_dim: d,
        fast_dim: k,
        n_start,
        seed,
        thetas: Vec::with_capacity(cap * d),
        ws: Vec::with_capacity(cap * k),
        slow_states: Vec::with_capacity(cap),
        fast_states: Vec::with_capacity(cap),
        slow_increments: Vec::with_capacity(cap * d),
        fast_increments: Vec::with_capacity(cap * k),
        coupled_residual: Vec::with_capacity(cap * d),
        steps_taken: 0,
        diverged: false,
    };
    tr.thetas.extend_from_slice(&theta);
    tr.ws.extend_from_slice(&w);
    tr.slow_states.push(z1);
    tr.fast_states.push(z2);

    let mut joint = vec![0.0; d + k];
    let (mut hbuf, mut gbuf) = (vec![0.0; d], vec![0.0; k]);
    let (mut m1, mut m2) = (vec![0.0; d], vec![0.0; k]);
    let mut prev_theta = vec![0.0; d];
    for step in 0..n_steps {
        let n = n_start + step;
        let a = spec.slow_steps.step(n)?;
        let b = spec.fast_steps.step(n)?;
        joint[..d].copy_from_slice(&theta);
        joint[d..].copy_from_slice(&w);
        match &spec.slow_mart {
            Some(m) => m(&theta, &mut rng, &mut m1),
            None => m1.iter_mut().for_each(|x| *x = 0.0),
        }
        match &spec.fast_mart {
            Some(m) => m(&joint, &mut rng, &mut m2),
            None => m2.iter_mut().for_each(|x| *x = 0.0),
        }
        (spec.slow_field)(&theta, spec.slow_kernel.value(z1), &mut hbuf);
        (spec.fast_field)(&theta, &w, spec.fast_kernel.value(z2), &mut gbuf);
        let ratio = if b > 0.0 { a / b } else { 0.0 };
        tr.coupled_residual.extend(hbuf.iter().map(|x| ratio * x));
        tr.slow_increments.extend_from_slice(&m1);
        tr.fast_increments.extend_from_slice(&m2);
        prev_theta.copy_from_slice(&theta);
        for i in 0..d {
            theta[i] += a * (hbuf[i] + m1[i]);
        }
        for i in 0..k {
            w[i] += b * (gbuf[i] + m2[i]);
        }
        z1 = spec.slow_kernel.sample_next(&prev_theta, z1, &mut rng);
        z2 = spec.fast_kernel.sample_next(&joint, z2, &mut rng);

        tr.steps_taken = step + 1;
        let norm = theta
            .iter()
            .chain(w.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            tr.diverged = true;
            if norm.is_finite() {
                tr.thetas.extend_from_slice(&theta);
                tr.ws.extend_from_slice(&w);
                tr.slow_states.push(z1);
                tr.fast_states.push(z2);
            }
            break;
        }
        tr.thetas.extend_from_slice(&theta);
        tr.ws.extend_from_slice(&w);
        tr.slow_states.push(z1);
        tr.fast_states.push(z2);
    }
    Ok(tr)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackingSummary {
    /// `|w_n - lambda(theta_n)|` for every recorded iterate.
    pub errors: Vec<f64>,
    /// First position of the trailing window.
    pub window_start: usize,
    pub window_mean: f64,
    pub window_max: f64,
}

/// Tracking error series and its mean and max over the trailing
/// `window_fraction` of the path.
pub fn tracking_error(
    traj: &CoupledTrajectory,
    lambda: &FieldFn,
    window_fraction: f64,
) -> Result<TrackingSummary> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return domain("window fraction must lie in (0, 1]");
    }
    if traj.is_empty() {
        return domain("empty trajectory");
    }
    let mut target = vec![0.0; traj.fast_dim];
    let errors: Vec<f64> = (0..traj.len())
        .map(|i| {
            lambda(traj.theta(i), &mut target);
            dist2(traj.w(i), &target)
        })
        .collect();
    let len = errors.len();
    let window = ((len as f64 * window_fraction).ceil() as usize).clamp(1, len);
    let window_start = len - window;
    let tail = &errors[window_start..];
    let mut acc = CompensatedSum::new();
    tail.iter().for_each(|&e| acc.add(e));
    Ok(TrackingSummary {
        window_start,
        window_mean: acc.value() / tail.len() as f64,
        window_max: tail.iter().copied().fold(0.0, f64::max),
        errors,
    })
}

/// Slow and coupled segmentations plus `l_m = max{k : T^s_k <= T^c_m}`.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledPartition {
    pub slow: SegmentPartition,
    pub coupled: SegmentPartition,
    pub l_map: Vec<usize>,
}

// Extends segments from n0 while the boundary stays at or below `max_index`
// and `keep(time)` holds for the last boundary time.
fn segments_until(
    sched: &StepSchedule,
    n0: u64,
    t: f64,
    max_segments: usize,
    max_index: u64,
    keep: impl Fn(f64) -> bool,
) -> Result<SegmentPartition> {
    let start = sched.t_of(n0)?;
    let mut global = CompensatedSum::new();
    global.add(start);
    let mut part = SegmentPartition {
        n0,
        t,
        boundaries: vec![n0],
        times: vec![start],
        lengths: Vec::new(),
    };
    let mut n = n0;
    'outer: while part.lengths.len() < max_segments && keep(*part.times.last().unwrap()) {
        let mut seg = CompensatedSum::new();
        let mut g = global;
        let mut m = n;
        while seg.value() < t {
            if m >= max_index {
                break 'outer;
            }
            let a = match sched.step(m) {
                Ok(a) => a,
                Err(Error::ScheduleExhausted { .. }) => break 'outer,
                Err(e) => return Err(e),
            };
            seg.add(a);
            g.add(a);
            m += 1;
        }
        n = m;
        global = g;
        part.boundaries.push(n);
        part.times.push(global.value());
        part.lengths.push(seg.value());
    }
    Ok(part)
}

/// Builds `coupled_segments` segments of length `T^c` on the fast clock and
/// as many `T^s` segments on the slow clock as fit below `max_index`, then
/// aligns them. Requires `T^c >= T^s + 1`.
pub fn coupled_partition(
    slow: &StepSchedule,
    fast: &StepSchedule,
    n0: u64,
    t_slow: f64,
    t_coupled: f64,
    coupled_segments: usize,
    max_index: u64,
) -> Result<CoupledPartition> {
    if !(t_slow > 0.0 && t_coupled > 0.0) {
        return domain("segment lengths must be positive");
    }
    if t_coupled < t_slow + 1.0 {
        return domain(format!(
            "T^c = {t_coupled} is below T^s + 1 = {}",
            t_slow + 1.0
        ));
    }
    let coupled = segments_until(fast, n0, t_coupled, coupled_segments, max_index, |_| true)?;
    if coupled.segments() == 0 {
        return domain("no complete coupled segment fits the index range");
    }
    let t_end = *coupled.times.last().unwrap();
    let slow_part = segments_until(slow, n0, t_slow, usize::MAX, max_index, |time| {
        time <= t_end
    })?;
    let l_map = coupled
        .times
        .iter()
        .take(coupled.segments())
        .map(|&tc| slow_part.last_boundary_before(tc).unwrap_or(0))
        .collect();
    Ok(CoupledPartition {
        slow: slow_part,
        coupled,
        l_map,
    })
}

/// Optional certified tails of the truncated sums.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct NestedTails {
    /// Bound on `sum_{k >= K} P(rho^s_k > delta_{B1} | ...)` beyond the supplied list.
    pub slow: f64,
    /// Same for the coupled probabilities.
    pub coupled: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NestedBound {
    pub bound: f64,
    pub slow_factor: f64,
    pub coupled_factor: f64,
    /// `f(m)` from the recursion.
    pub f: Vec<f64>,
    /// `g(m)`: slow probabilities after `l_m`.
    pub g: Vec<f64>,
}

/// Evaluates the nested two-timescale lock-in bound.
///
/// `slow_probs[k]` and `coupled_probs[m]` are per-segment exceedance
/// probabilities and `l_map[m]` aligns coupled segment `m` with slow segment
/// `l_m`. `f(0) = slow_probs[l_0]`; for `m >= 1`
///
/// ```text
/// f(m) = ps[l_m] / (1 - pc[m-1] / (1 - f(m-1) - sum_{l_{m-1} < k < l_m} ps[k]))
/// ```
///
/// and the result is
/// `(1 - sum ps) (1 - sum_m pc[m] / (1 - f(m) - g(m)))`, each factor clamped to
/// `[0, 1]`.
pub fn nested_bound(
    slow_probs: &[f64],
    coupled_probs: &[f64],
    l_map: &[usize],
    tails: NestedTails,
) -> Result<NestedBound> {
    let valid = |p: &f64| (0.0..1.0).contains(p);
    if !slow_probs.iter().all(valid) || !coupled_probs.iter().all(valid) {
        return Err(Error::Precondition(
            "segment probabilities must lie in [0, 1)".into(),
        ));
    }
    if !(tails.slow >= 0.0 && tails.coupled >= 0.0) {
        return Err(Error::Precondition(
            "tail bounds must be nonnegative".into(),
        ));
    }
    if l_map.len() != coupled_probs.len() {
        return Err(Error::Precondition(format!(
            "l map has {} entries for {} coupled segments",
            l_map.len(),
            coupled_probs.len()
        )));
    }
    if l_map.windows(2).any(|w| w[0] > w[1]) || l_map.iter().any(|&l| l >= slow_probs.len()) {
        return Err(Error::Precondition(
            "l map must be non-decreasing and index the slow probabilities".into(),
        ));
    }

    let mut slow_total = CompensatedSum::new();
    slow_probs.iter().for_each(|&p| slow_total.add(p));
    slow_total.add(tails.slow);
    let slow_factor = (1.0 - slow_total.value()).clamp(0.0, 1.0);

    // suffix sums of ps for g(m)
    let mut suffix = vec![0.0; slow_probs.len() + 1];
    let mut acc = CompensatedSum::new();
    for k in (0..slow_probs.len()).rev() {
        acc.add(slow_probs[k]);
        suffix[k] = acc.value();
    }

    let mut f = Vec::with_capacity(coupled_probs.len());
    let mut g = Vec::with_capacity(coupled_probs.len());
    let mut min_den = f64::INFINITY;
    let mut coupled_sum = CompensatedSum::new();
    let mut first_term = None;
    for (m, (&pc, &l)) in coupled_probs.iter().zip(l_map).enumerate() {
        let fm = if m == 0 {
            slow_probs[l]
        } else {
            let prev = l_map[m - 1];
            let between: f64 = slow_probs[(prev + 1).min(l)..l].iter().sum();
            let inner = 1.0 - f[m - 1] - between;
            if inner <= 0.0 {
                return Err(Error::VacuousBound { segment: m });
            }
            let outer = 1.0 - coupled_probs[m - 1] / inner;
            if outer <= 0.0 {
                return Err(Error::VacuousBound { segment: m });
            }
            slow_probs[l] / outer
        };
        let gm = suffix[l + 1] + tails.slow;
        let den = 1.0 - fm - gm;
        if den <= 0.0 {
            return Err(Error::VacuousBound { segment: m });
        }
        min_den = min_den.min(den);
        if m == 0 {
            first_term = Some((den - pc) / den);
        } else {
            coupled_sum.add(pc / den);
        }
        f.push(fm);
        g.push(gm);
    }
    if tails.coupled > 0.0 {
        if !min_den.is_finite() {
            min_den = 1.0 - tails.slow;
            if min_den <= 0.0 {
                return Err(Error::VacuousBound { segment: 0 });
            }
        }
        coupled_sum.add(tails.coupled / min_den);
    }
    let coupled_factor = (first_term.unwrap_or(1.0) - coupled_sum.value()).clamp(0.0, 1.0);
    Ok(NestedBound {
        bound: slow_factor * coupled_factor,
        slow_factor,
        coupled_factor,
        f,
        g,
    })
}

/// `S1(n0) = s_a(n0)` and `S2(n0) = s_b(n0)`; fails unless `S1 < S2`.
pub fn s1_s2(slow: &StepSchedule, fast: &StepSchedule, n0: u64, tol: f64) -> Result<(f64, f64)> {
    let s1 = slow.s_tail(n0, tol)?.value;
    let s2 = fast.s_tail(n0, tol)?.value;
    if s1 >= s2 {
        return Err(Error::Precondition(format!(
            "slow tail S1 = {s1} is not below fast tail S2 = {s2}"
        )));
    }
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, uniform_martingale, ProblemSpec, RunSetup, SimOptions};
    use crate::markov::DriftFn;
    use nalgebra::DMatrix;

    fn one_state() -> KernelFamily {
        KernelFamily::constant(vec![vec![0.0]], DMatrix::identity(1, 1)).unwrap()
    }

    fn two_state() -> KernelFamily {
        KernelFamily::constant(
            vec![vec![0.05], vec![-0.05]],
            DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
        )
        .unwrap()
    }

    fn frozen_spec(noise: bool) -> TwoTimescaleSpec {
        TwoTimescaleSpec {
            slow_dim: 1,
            fast_dim: 1,
            slow_field: Arc::new(|_t: &[f64], _z: &[f64], out: &mut [f64]| out[0] = 0.0),
            slow_kernel: one_state(),
            slow_mart: None,
            fast_field: Arc::new(|t: &[f64], w: &[f64], z: &[f64], out: &mut [f64]| {
                out[0] = t[0] - w[0] + z[0]
            }),
            fast_kernel: if noise { two_state() } else { one_state() },
            fast_mart: noise.then(|| uniform_martingale(0.05)),
            lambda: Arc::new(|t: &[f64], out: &mut [f64]| out[0] = t[0]),
            slow_steps: SlowSteps::Frozen,
            fast_steps: StepSchedule::power_law(0.6).unwrap(),
            fast_growth: 2.0,
            fast_mart_bound: 0.05,
            t_slow: 1.0,
            t_fast: 1.0,
        }
    }

    #[test]
    fn frozen_slow_variable_is_tracked() {
        let spec = frozen_spec(false);
        let tr = simulate_coupled(&spec, &[0.7], &[-1.0], (0, 0), 1, 100_000, 5).unwrap();
        let last = tr.len() - 1;
        assert_eq!(tr.theta(last), &[0.7]);
        assert!((tr.w(last)[0] - 0.7).abs() <= 1e-3);
        let sum = tracking_error(&tr, &spec.lambda, 0.1).unwrap();
        assert!(sum.window_max <= 1e-3);
    }

    #[test]
    fn zero_fast_field_keeps_w() {
        let mut spec = frozen_spec(false);
        spec.fast_field =
            Arc::new(|_t: &[f64], _w: &[f64], _z: &[f64], out: &mut [f64]| out[0] = 0.0);
        let tr = simulate_coupled(&spec, &[0.7], &[-1.0], (0, 0), 1, 1000, 5).unwrap();
        assert!(tr.ws.iter().all(|&w| w == -1.0));
    }

    #[test]
    fn frozen_coupled_run_reduces_bitwise_to_engine() {
        let spec = frozen_spec(true);
        let theta_star = 0.3;
        let tr = simulate_coupled(&spec, &[theta_star], &[2.0], (0, 1), 1, 5000, 99).unwrap();
        let f: DriftFn = Arc::new(move |w: &[f64], z: &[f64], out: &mut [f64]| {
            out[0] = theta_star - w[0] + z[0]
        });
        let single = ProblemSpec::new(1, f, two_state(), 2.0)
            .unwrap()
            .with_martingale(0.05, uniform_martingale(0.05));
        let setup = RunSetup::new(vec![2.0], 1, 5000)
            .with_initial_state(crate::engine::InitialState::Fixed(1));
        let rec = simulate(
            &single,
            &spec.fast_steps,
            &setup,
            99,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.thetas, tr.ws);
        assert_eq!(rec.states, tr.fast_states);
        assert_eq!(rec.increments.as_deref().unwrap(), &tr.fast_increments[..]);
    }

    #[test]
    fn same_seed_same_path() {
        let spec = frozen_spec(true);
        let a = simulate_coupled(&spec, &[0.1], &[0.0], (0, 0), 1, 500, 3).unwrap();
        let b = simulate_coupled(&spec, &[0.1], &[0.0], (0, 0), 1, 500, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_coupled(&spec, &[0.1], &[0.0], (0, 0), 1, 500, 4).unwrap();
        assert_ne!(a.ws, c.ws);
    }

    #[test]
    fn manufactured_path_has_zero_tracking_error() {
        let tr = CoupledTrajectory {
            slow_dim: 1,
            fast_dim: 1,
            n_start: 1,
            seed: 0,
            thetas: vec![0.1, 0.4, 0.9],
            ws: vec![0.1, 0.4, 0.9],
            slow_states: vec![0; 3],
            fast_states: vec![0; 3],
            slow_increments: vec![],
            fast_increments: vec![],
            coupled_residual: vec![],
            steps_taken: 2,
            diverged: false,
        };
        let lambda: FieldFn = Arc::new(|t: &[f64], out: &mut [f64]| out[0] = t[0]);
        let s = tracking_error(&tr, &lambda, 0.5).unwrap();
        assert!(s.errors.iter().all(|&e| e == 0.0));
        assert_eq!(s.window_mean, 0.0);
    }

    #[test]
    fn partition_with_constant_steps() {
        let a = StepSchedule::explicit(vec![0.1; 400])
            .unwrap()
            .with_offset(0)
            .unwrap();
        let part = coupled_partition(&a, &a, 0, 1.0, 2.0, 5, u64::MAX).unwrap();
        assert_eq!(part.coupled.boundaries, vec![0, 20, 40, 60, 80, 100]);
        for (m, &b) in part.slow.boundaries.iter().enumerate() {
            assert_eq!(b, 10 * m as u64);
        }
        assert_eq!(part.l_map, vec![0, 2, 4, 6, 8]);
        assert!(coupled_partition(&a, &a, 0, 1.0, 1.5, 5, u64::MAX).is_err());
    }

    #[test]
    fn partition_l_map_matches_recomputation() {
        let a = StepSchedule::power_law(1.0).unwrap();
        let b = StepSchedule::power_law(0.6).unwrap();
        let part = coupled_partition(&a, &b, 10, 1.0, 2.0, 12, 2_000_000).unwrap();
        assert!(part.l_map.windows(2).all(|w| w[0] <= w[1]));
        for (m, &l) in part.l_map.iter().enumerate() {
            let tc = b.t_of(part.coupled.boundaries[m]).unwrap();
            let expect = part
                .slow
                .boundaries
                .iter()
                .rposition(|&n| a.t_of(n).unwrap() <= tc + 1e-9)
                .unwrap();
            assert_eq!(l, expect, "m = {m}");
        }
    }

    #[test]
    fn nested_bound_hand_cases() {
        let none = NestedTails::default();
        assert_eq!(
            nested_bound(&[0.0; 4], &[0.0; 3], &[0, 1, 2], none)
                .unwrap()
                .bound,
            1.0
        );
        assert_eq!(nested_bound(&[0.1], &[0.1], &[0], none).unwrap().bound, 0.8);
        assert!(matches!(
            nested_bound(&[1.0], &[0.1], &[0], none),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            nested_bound(&[0.6, 0.5], &[0.1], &[0], none),
            Err(Error::VacuousBound { segment: 0 })
        ));
    }

    #[test]
    fn nested_bound_is_monotone_on_a_grid() {
        let levels = [0.0, 0.01, 0.03, 0.06];
        let l_map = [0, 1, 1];
        let base_s = [0.01, 0.02, 0.01];
        let base_c = [0.02, 0.01, 0.03];
        let eval = |s: &[f64], c: &[f64]| {
            nested_bound(s, c, &l_map, NestedTails::default())
                .unwrap()
                .bound
        };
        for i in 0..3 {
            for pair in levels.windows(2) {
                let (mut lo, mut hi) = (base_s, base_s);
                lo[i] = pair[0];
                hi[i] = pair[1];
                assert!(eval(&hi, &base_c) <= eval(&lo, &base_c));
                let (mut lo, mut hi) = (base_c, base_c);
                lo[i] = pair[0];
                hi[i] = pair[1];
                assert!(eval(&base_s, &hi) <= eval(&base_s, &lo));
            }
        }
    }

    #[test]
    fn slow_and_fast_tails() {
        let a = StepSchedule::power_law(1.0).unwrap();
        let b = StepSchedule::power_law(0.6).unwrap();
        let (s1, s2) = s1_s2(&a, &b, 10, 1e-12).unwrap();
        // Hurwitz zeta(2, 10) and zeta(1.2, 10)
        assert!((s1 - 0.105_166_335_681_685_75).abs() < 1e-10, "{s1}");
        assert!((s2 - 3.186_964_810_453_687).abs() < 1e-8, "{s2}");
        assert!(s1_s2(&a, &a, 10, 1e-12).is_err());
        let (s1b, s2b) = s1_s2(&a, &b, 100, 1e-12).unwrap();
        assert!(s1b < s1 && s2b < s2);
    }
}
