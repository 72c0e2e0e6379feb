//! The single-timescale recursion
//!
//! ```text
//! theta_{n+1} = theta_n + a(n) [f(theta_n, y(Y_n)) + M_{n+1}],   Y_{n+1} ~ Pi_{theta_n}(Y_n, .)
//! ```
//!
//! and its pre/post-state variant driven by `f(theta_n, Y_n, Y_{n+1})`.
//!
//! Per step the random draws happen in a fixed order: the martingale
//! increment (using `theta_n`), then the kernel transition (using `theta_n`).
//! A missing martingale and a one-state kernel consume no randomness.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::markov::{self, DriftFn, KernelFamily};
use crate::numeric::{norm2, CompensatedSum};
use crate::rng::stream;
use crate::schedules::StepSchedule;

/// Iterates beyond this norm (or non-finite) end the run with a divergence flag.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// `mart(theta, rng, out)` writes `M_{n+1}` given `theta_n`.
pub type MartingaleFn = Arc<dyn Fn(&[f64], &mut dyn RngCore, &mut [f64]) + Send + Sync>;

/// `h(theta, out)`.
pub type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Independent uniform components on `[-half_width, half_width]`.
pub fn uniform_martingale(half_width: f64) -> MartingaleFn {
    Arc::new(
        move |_theta: &[f64], rng: &mut dyn RngCore, out: &mut [f64]| {
            for x in out.iter_mut() {
                *x = half_width * (2.0 * rng.gen::<f64>() - 1.0);
            }
        },
    )
}

/// Drift, martingale noise, kernel family and declared constants of one
/// recursion.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dim: usize,
    pub f: DriftFn,
    /// `None` means `M = 0`.
    pub mart: Option<MartingaleFn>,
    /// `K'` in `|M_{n+1}| <= K'(1 + |theta_n|)`.
    pub mart_bound: f64,
    pub kernel: KernelFamily,
    pub h_analytic: Option<FieldFn>,
    /// `K` in `sup_y |f(theta, y)| <= K(1 + |theta|)`.
    pub growth: f64,
    /// Lipschitz constant of `h`, when known.
    pub lipschitz: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dim", &self.dim)
            .field("martingale", &self.mart.is_some())
            .field("mart_bound", &self.mart_bound)
            .field("kernel", &self.kernel)
            .field("h_analytic", &self.h_analytic.is_some())
            .field("growth", &self.growth)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(dim: usize, f: DriftFn, kernel: KernelFamily, growth: f64) -> Result<Self> {
        if dim == 0 {
            return domain("dimension must be at least 1");
        }
        if !(growth >= 0.0 && growth.is_finite()) {
            return domain(format!(
                "growth constant K = {growth} must be finite and nonnegative"
            ));
        }
        Ok(Self {
            dim,
            f,
            mart: None,
            mart_bound: 0.0,
            kernel,
            h_analytic: None,
            growth,
            lipschitz: None,
        })
    }

    pub fn with_martingale(mut self, bound: f64, mart: MartingaleFn) -> Self {
        self.mart = Some(mart);
        self.mart_bound = bound;
        self
    }

    pub fn without_martingale(mut self) -> Self {
        self.mart = None;
        self.mart_bound = 0.0;
        self
    }

    pub fn with_mean_field(mut self, h: FieldFn) -> Self {
        self.h_analytic = Some(h);
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    /// `max(K, K')`.
    pub fn k_tilde(&self) -> f64 {
        self.growth.max(self.mart_bound)
    }

    /// `h(theta)`: the analytic field when supplied, otherwise the stationary
    /// average of `f`.
    pub fn mean_field(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match &self.h_analytic {
            Some(h) => {
                let mut out = vec![0.0; self.dim];
                h(theta, &mut out);
                Ok(out)
            }
            None => markov::mean_field(&self.kernel, &*self.f, theta, self.dim),
        }
    }

    /// Checks the growth bound of `f` on every `(theta, state)` pair of `grid`
    /// and the declared martingale bound on `samples` draws per point.
    pub fn audit(&self, grid: &[Vec<f64>], samples: usize, seed: u64) -> Result<AuditReport> {
        let mut rng = stream(seed);
        let mut buf = vec![0.0; self.dim];
        let mut worst_f = 0.0_f64;
        let mut worst_m = 0.0_f64;
        for theta in grid {
            if theta.len() != self.dim {
                return domain("audit grid point has the wrong dimension");
            }
            let scale = 1.0 + norm2(theta);
            for s in 0..self.kernel.state_count() {
                (self.f)(theta, self.kernel.value(s), &mut buf);
                let ratio = norm2(&buf) / scale;
                worst_f = worst_f.max(ratio);
                if ratio > self.growth * (1.0 + 1e-12) {
                    return Err(Error::Audit(format!(
                        "|f(theta, y)| = {} exceeds K(1 + |theta|) = {} at theta = {theta:?}, state {s}",
                        norm2(&buf),
                        self.growth * scale
                    )));
                }
            }
            if let Some(m) = &self.mart {
                for _ in 0..samples {
                    m(theta, &mut rng, &mut buf);
                    let ratio = norm2(&buf) / scale;
                    worst_m = worst_m.max(ratio);
                    if ratio > self.mart_bound * (1.0 + 1e-12) {
                        return Err(Error::Audit(format!(
                            "|M| = {} exceeds K'(1 + |theta|) = {} at theta = {theta:?}",
                            norm2(&buf),
                            self.mart_bound * scale
                        )));
                    }
                }
            }
        }
        Ok(AuditReport {
            points: grid.len(),
            max_growth_ratio: worst_f,
            max_martingale_ratio: worst_m,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AuditReport {
    pub points: usize,
    /// `max |f| / (1 + |theta|)` seen on the grid
    pub max_growth_ratio: f64,
    pub max_martingale_ratio: f64,
}

/// Law of `Y_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InitialState {
    Fixed(usize),
    /// Drawn from the stationary law at `theta_0` (one uniform variate before
    /// the first step).
    Stationary,
}

#[derive(Debug, Clone)]
pub struct RunSetup {
    pub theta0: Vec<f64>,
    pub y0: InitialState,
    pub n_start: u64,
    pub n_steps: u64,
}

impl RunSetup {
    pub fn new(theta0: Vec<f64>, n_start: u64, n_steps: u64) -> Self {
        Self {
            theta0,
            y0: InitialState::Fixed(0),
            n_start,
            n_steps,
        }
    }

    pub fn with_initial_state(mut self, y0: InitialState) -> Self {
        self.y0 = y0;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Keep every `stride`-th iterate (the last iterate is always kept).
    pub stride: usize,
    /// Store `M_{n+1}` per step; requires `stride == 1`.
    pub record_increments: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            record_increments: true,
        }
    }
}

/// One simulated path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub dim: usize,
    pub n_start: u64,
    pub stride: usize,
    pub seed: u64,
    pub schedule: String,
    /// Step index of each recorded iterate.
    pub indices: Vec<u64>,
    /// Recorded iterates, flattened row-major.
    pub thetas: Vec<f64>,
    /// Markov state at each recorded iterate.
    pub states: Vec<usize>,
    /// `M_{k+1}` for every step taken, flattened.
    pub increments: Option<Vec<f64>>,
    pub steps_taken: u64,
    pub diverged: bool,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_theta(&self) -> &[f64] {
        self.theta(self.len() - 1)
    }

    pub fn increment(&self, step: usize) -> Option<&[f64]> {
        self.increments
            .as_ref()
            .map(|inc| &inc[step * self.dim..(step + 1) * self.dim])
    }
}

/// How a driven run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub steps_taken: u64,
    pub diverged: bool,
    /// The observer asked to stop early.
    pub stopped: bool,
}

/// What the observer sees after each step.
pub struct StepEvent<'a> {
    /// Index of the new iterate (`n + 1`).
    pub n: u64,
    pub theta: &'a [f64],
    pub state: usize,
    pub increment: &'a [f64],
}

pub(crate) fn diverging(theta: &[f64]) -> bool {
    let norm = norm2(theta);
    !norm.is_finite() || norm > DIVERGENCE_NORM
}

pub(crate) fn sample_stationary<R: RngCore + ?Sized>(
    kernel: &KernelFamily,
    theta: &[f64],
    rng: &mut R,
) -> Result<usize> {
    let pi = markov::stationary(kernel, theta)?;
    if pi.len() == 1 {
        return Ok(0);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(pi.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

pub(crate) fn initial_state<R: RngCore + ?Sized>(
    kernel: &KernelFamily,
    theta0: &[f64],
    y0: InitialState,
    rng: &mut R,
) -> Result<usize> {
    match y0 {
        InitialState::Fixed(s) if s < kernel.state_count() => Ok(s),
        InitialState::Fixed(s) => domain(format!(
            "initial state {s} out of range for {} states",
            kernel.state_count()
        )),
        InitialState::Stationary => sample_stationary(kernel, theta0, rng),
    }
}

/// Runs the recursion from `(theta, state)` at index `n_start` for up to
/// `n_steps` steps, calling `observe` after every step. Returning `false`
/// from the observer stops the run.
#[allow(clippy::too_many_arguments)]
pub fn drive<R, O>(
    spec: &ProblemSpec,
    sched: &StepSchedule,
    theta: &mut [f64],
    state: &mut usize,
    n_start: u64,
    n_steps: u64,
    rng: &mut R,
    mut observe: O,
) -> Result<RunOutcome>
where
    R: RngCore,
    O: FnMut(StepEvent<'_>) -> bool,
{
    let d = spec.dim;
    if theta.len() != d {
        return domain(format!(
            "theta0 has dimension {}, expected {d}",
            theta.len()
        ));
    }
    if n_start < sched.offset() {
        return domain(format!(
            "start index {n_start} below schedule offset {}",
            sched.offset()
        ));
    }
    let constant_kernel = spec.kernel.is_constant();
    let mut fbuf = vec![0.0; d];
    let mut mbuf = vec![0.0; d];
    let mut prev = vec![0.0; d];
    for step in 0..n_steps {
        let n = n_start + step;
        let a = sched.step(n)?;
        match &spec.mart {
            Some(m) => m(theta, rng, &mut mbuf),
            None => mbuf.iter_mut().for_each(|x| *x = 0.0),
        }
        (spec.f)(theta, spec.kernel.value(*state), &mut fbuf);
        if !constant_kernel {
            prev.copy_from_slice(theta);
        }
        for i in 0..d {
            theta[i] += a * (fbuf[i] + mbuf[i]);
        }
        let kernel_theta: &[f64] = if constant_kernel { theta } else { &prev };
        *state = spec.kernel.sample_next(kernel_theta, *state, rng);

        if diverging(theta) {
            let finite = theta.iter().all(|x| x.is_finite());
            if finite {
                observe(StepEvent {
                    n: n + 1,
                    theta,
                    state: *state,
                    increment: &mbuf,
                });
            }
            return Ok(RunOutcome {
                steps_taken: step + 1,
                diverged: true,
                stopped: false,
            });
        }
        let keep_going = observe(StepEvent {
            n: n + 1,
            theta,
            state: *state,
            increment: &mbuf,
        });
        if !keep_going {
            return Ok(RunOutcome {
                steps_taken: step + 1,
                diverged: false,
                stopped: true,
            });
        }
    }
    Ok(RunOutcome {
        steps_taken: n_steps,
        diverged: false,
        stopped: false,
    })
}

/// Simulates one path with its own stream seeded by `seed`.
pub fn simulate(
    spec: &ProblemSpec,
    sched: &StepSchedule,
    setup: &RunSetup,
    seed: u64,
    opts: &SimOptions,
) -> Result<TrajectoryRecord> {
    if opts.stride == 0 {
        return domain("checkpoint stride must be at least 1");
    }
    if opts.record_increments && opts.stride != 1 {
        return domain("martingale increments can only be recorded with stride 1");
    }
    let d = spec.dim;
    let mut rng = stream(seed);
    let mut theta = setup.theta0.clone();
    if theta.len() != d {
        return domain(format!(
            "theta0 has dimension {}, expected {d}",
            theta.len()
        ));
    }
    let mut state = initial_state(&spec.kernel, &theta, setup.y0, &mut rng)?;

    let cap = (setup.n_steps / opts.stride as u64 + 2).min(1 << 24) as usize;
    let mut rec = TrajectoryRecord {
        dim: d,
        n_start: setup.n_start,
        stride: opts.stride,
        seed,
        schedule: sched.literal(),
        indices: Vec::with_capacity(cap),
        thetas: Vec::with_capacity(cap * d),
        states: Vec::with_capacity(cap),
        increments: opts
            .record_increments
            .then(|| Vec::with_capacity(setup.n_steps.min(1 << 24) as usize * d)),
        steps_taken: 0,
        diverged: false,
    };
    rec.indices.push(setup.n_start);
    rec.thetas.extend_from_slice(&theta);
    rec.states.push(state);

    let stride = opts.stride as u64;
    let last = setup.n_start + setup.n_steps;
    let outcome = {
        let rec = &mut rec;
        drive(
            spec,
            sched,
            &mut theta,
            &mut state,
            setup.n_start,
            setup.n_steps,
            &mut rng,
            |ev| {
                if let Some(inc) = rec.increments.as_mut() {
                    inc.extend_from_slice(ev.increment);
                }
                let rel = ev.n - setup.n_start;
                if rel.is_multiple_of(stride) || ev.n == last || diverging(ev.theta) {
                    rec.indices.push(ev.n);
                    rec.thetas.extend_from_slice(ev.theta);
                    rec.states.push(ev.state);
                }
                true
            },
        )?
    };
    rec.steps_taken = outcome.steps_taken;
    rec.diverged = outcome.diverged;
    Ok(rec)
}

/// `f(theta_n, y(Y_n), y(Y_{n+1}), out)`.
pub type PrePostFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A pre/post-state path: the increments of the embedded record are the
/// induced martingale differences `f - E[f | F_n]`.
#[derive(Debug, Clone, Serialize)]
pub struct PrePostRecord {
    pub trajectory: TrajectoryRecord,
    /// `E[f(theta_n, Y_n, Y_{n+1}) | F_n]` per step, flattened.
    pub conditional_means: Vec<f64>,
    /// `max |f - (mean + M)|_inf` over the path.
    pub max_split_error: f64,
}

/// Simulates `theta_{n+1} = theta_n + a(n) f(theta_n, Y_n, Y_{n+1})`: the
/// successor is drawn first, then the drift is applied.
pub fn simulate_prepost(
    dim: usize,
    f3: &PrePostFn,
    kernel: &KernelFamily,
    sched: &StepSchedule,
    setup: &RunSetup,
    seed: u64,
) -> Result<PrePostRecord> {
    if setup.theta0.len() != dim {
        return domain(format!(
            "theta0 has dimension {}, expected {dim}",
            setup.theta0.len()
        ));
    }
    if setup.n_start < sched.offset() {
        return domain("start index below schedule offset");
    }
    let mut rng = stream(seed);
    let mut theta = setup.theta0.clone();
    let mut state = initial_state(kernel, &theta, setup.y0, &mut rng)?;
    let steps = setup.n_steps.min(1 << 24) as usize;
    let mut rec = TrajectoryRecord {
        dim,
        n_start: setup.n_start,
        stride: 1,
        seed,
        schedule: sched.literal(),
        indices: vec![setup.n_start],
        thetas: theta.clone(),
        states: vec![state],
        increments: Some(Vec::with_capacity(steps * dim)),
        steps_taken: 0,
        diverged: false,
    };
    let mut means = Vec::with_capacity(steps * dim);
    let mut max_split_error = 0.0_f64;
    let mut value = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    let mut mean = vec![CompensatedSum::new(); dim];

    for step in 0..setup.n_steps {
        let n = setup.n_start + step;
        let a = sched.step(n)?;
        let pi = kernel.matrix(&theta)?;
        let next = kernel.sample_next(&theta, state, &mut rng);
        let y = kernel.value(state);
        f3(&theta, y, kernel.value(next), &mut value);

        mean.iter_mut().for_each(|m| *m = CompensatedSum::new());
        for s2 in 0..kernel.state_count() {
            let p = pi[(state, s2)];
            if p == 0.0 {
                continue;
            }
            f3(&theta, y, kernel.value(s2), &mut buf);
            for c in 0..dim {
                mean[c].add(p * buf[c]);
            }
        }
        let inc = rec.increments.as_mut().expect("increments recorded");
        for c in 0..dim {
            let m = mean[c].value();
            let mart = value[c] - m;
            max_split_error = max_split_error.max((value[c] - (m + mart)).abs());
            means.push(m);
            inc.push(mart);
            theta[c] += a * value[c];
        }
        state = next;
        rec.steps_taken = step + 1;
        if diverging(&theta) {
            rec.diverged = true;
            if theta.iter().all(|x| x.is_finite()) {
                rec.indices.push(n + 1);
                rec.thetas.extend_from_slice(&theta);
                rec.states.push(state);
            }
            break;
        }
        rec.indices.push(n + 1);
        rec.thetas.extend_from_slice(&theta);
        rec.states.push(state);
    }
    Ok(PrePostRecord {
        trajectory: rec,
        conditional_means: means,
        max_split_error,
    })
}

/// Result of the sup-norm monitor.
#[derive(Debug, Clone, Serialize)]
pub struct GronwallCheck {
    pub sup_norm: f64,
    pub diverged: bool,
    /// True when every recorded iterate lies inside the envelope.
    pub holds: bool,
    pub violations: usize,
    pub first_violation: Option<u64>,
    /// `max |theta_n| / envelope(n)`
    pub max_ratio: f64,
}

/// `(|theta_0| + K t) e^{K t}` with `t` the step sum since the start.
pub fn gronwall_envelope(theta0_norm: f64, k_tilde: f64, t: f64) -> f64 {
    (theta0_norm + k_tilde * t) * (k_tilde * t).exp()
}

/// Sup norm of the recorded iterates and the pathwise check of the Gronwall
/// envelope with `k_tilde = max(K, K')`.
pub fn sup_norm_monitor(
    traj: &TrajectoryRecord,
    sched: &StepSchedule,
    k_tilde: f64,
) -> Result<GronwallCheck> {
    if traj.is_empty() {
        return domain("empty trajectory");
    }
    let theta0_norm = norm2(traj.theta(0));
    let mut out = GronwallCheck {
        sup_norm: 0.0,
        diverged: traj.diverged,
        holds: true,
        violations: 0,
        first_violation: None,
        max_ratio: 0.0,
    };
    let mut t = CompensatedSum::new();
    let mut at = traj.n_start;
    for i in 0..traj.len() {
        let n = traj.indices[i];
        while at < n {
            t.add(sched.step(at)?);
            at += 1;
        }
        let norm = norm2(traj.theta(i));
        out.sup_norm = out.sup_norm.max(norm);
        let env = gronwall_envelope(theta0_norm, k_tilde, t.value());
        let ratio = if env > 0.0 {
            norm / env
        } else if norm == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        out.max_ratio = out.max_ratio.max(ratio);
        // relative slack for rounding in long sums
        if norm > env * (1.0 + 1e-12) + 1e-300 {
            out.violations += 1;
            out.holds = false;
            out.first_violation.get_or_insert(n);
        }
    }
    Ok(out)
}
