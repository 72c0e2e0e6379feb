//! The mean-field ODE `theta' = h(theta)` and everything built on its flow:
//! regions and attractor neighbourhoods, the horizon `T`, the constants `C`
//! and `L`, the segment partition `{n_m}` and the segment deviations `rho_m`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::numeric::{dist2, linspace, norm2, CompensatedSum};
use crate::schedules::StepSchedule;

/// Norm above which a flow is declared escaped.
pub const ESCAPE_NORM: f64 = 1e12;

/// Axis-aligned box or Euclidean ball. Box bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Region {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || !(radius >= 0.0) || !radius.is_finite() {
            return domain("ball needs a nonempty center and a finite radius >= 0");
        }
        Ok(Region::Ball { center, radius })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::cuboid(vec![lo], vec![hi])
    }

    pub fn cuboid(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return domain("box bounds must be nonempty and of equal length");
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return domain("box needs lo <= hi on every axis");
        }
        Ok(Region::Box { lo, hi })
    }

    /// The whole space.
    pub fn everything(dim: usize) -> Self {
        Region::Box {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { center, .. } => center.len(),
            Region::Box { lo, .. } => lo.len(),
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            Region::Ball { .. } => true,
            Region::Box { lo, hi } => lo.iter().chain(hi).all(|x| x.is_finite()),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Ball { center, radius } => dist2(x, center) <= *radius,
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h),
        }
    }

    /// Euclidean distance from `x` to the region (0 inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Region::Ball { center, radius } => (dist2(x, center) - radius).max(0.0),
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| {
                    let g = (l - v).max(v - h).max(0.0);
                    g * g
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// `sup_{x in region} |x|`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Region::Ball { center, radius } => norm2(center) + radius,
            Region::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| {
                    let m = l.abs().max(h.abs());
                    m * m
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Region::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    fn corners(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = self.bounding_box();
        let d = lo.len();
        (0..1usize << d.min(20))
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] })
                    .collect()
            })
            .collect()
    }

    /// True when `self` lies inside `other` (closed-form for the supported shapes).
    pub fn is_subset_of(&self, other: &Region) -> bool {
        const SLACK: f64 = 1e-12;
        match (self, other) {
            (
                Region::Ball {
                    center: c1,
                    radius: r1,
                },
                Region::Ball {
                    center: c2,
                    radius: r2,
                },
            ) => dist2(c1, c2) + r1 <= r2 + SLACK,
            (Region::Ball { .. }, Region::Box { lo, hi })
            | (Region::Box { .. }, Region::Box { lo, hi }) => {
                let (a, b) = self.bounding_box();
                a.iter().zip(lo).all(|(x, l)| *x >= l - SLACK)
                    && b.iter().zip(hi).all(|(x, h)| *x <= h + SLACK)
            }
            (Region::Box { .. }, Region::Ball { center, radius }) => {
                self.is_bounded()
                    && self
                        .corners()
                        .iter()
                        .all(|c| dist2(c, center) <= radius + SLACK)
            }
        }
    }

    /// Deterministic cover of the closed region: `density` points per axis of
    /// the bounding box (kept when inside), every box corner, and for balls
    /// the `2d` axis extremes.
    pub fn grid(&self, density: usize) -> Result<Vec<Vec<f64>>> {
        if !self.is_bounded() {
            return domain("cannot grid an unbounded region");
        }
        let (lo, hi) = self.bounding_box();
        let d = lo.len();
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|i| linspace(lo[i], hi[i], density.max(1)))
            .collect();
        let total: usize = axes.iter().map(|a| a.len()).product();
        if total > 5_000_000 {
            return domain(format!("grid of {total} points is too large"));
        }
        let mut out = Vec::with_capacity(total + (1 << d.min(20)));
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let p: Vec<f64> = (0..d).map(|i| axes[i][idx[i]]).collect();
            if self.contains(&p) {
                out.push(p);
            }
            for i in 0..d {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
            }
        }
        match self {
            Region::Box { .. } => {
                for c in self.corners() {
                    if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
            Region::Ball { center, radius } => {
                for i in 0..d {
                    for sign in [-1.0, 1.0] {
                        let mut p = center.clone();
                        p[i] += sign * radius;
                        if !out.contains(&p) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Uniform draw from a bounded region.
    pub fn sample_uniform<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Region::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l + (h - l) * rng.gen::<f64>())
                .collect(),
            Region::Ball { center, radius } => {
                let d = center.len();
                let dir: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let n = norm2(&dir).max(f64::MIN_POSITIVE);
                let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
                center
                    .iter()
                    .zip(&dir)
                    .map(|(c, u)| c + r * u / n)
                    .collect()
            }
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// The attractor `H`.
#[derive(Clone)]
pub enum Attractor {
    Points(Vec<Vec<f64>>),
    /// `{theta : |V(theta)| <= tol}`; `|V|` serves as the distance to `H`
    /// outside that set.
    ZeroSet {
        v: ScalarFn,
        tol: f64,
    },
}

impl fmt::Debug for Attractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attractor::Points(p) => f.debug_tuple("Points").field(p).finish(),
            Attractor::ZeroSet { tol, .. } => f.debug_struct("ZeroSet").field("tol", tol).finish(),
        }
    }
}

impl Attractor {
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Attractor::Points(pts) => pts
                .iter()
                .map(|p| dist2(x, p))
                .fold(f64::INFINITY, f64::min),
            Attractor::ZeroSet { v, tol } => {
                let val = v(x).abs();
                if val <= *tol {
                    0.0
                } else {
                    val
                }
            }
        }
    }
}

/// `H`, `B`, `G` and the radii of the lock-in statement.
#[derive(Debug, Clone)]
pub struct GeometrySpec {
    pub attractor: Attractor,
    pub b: Region,
    pub g: Region,
    pub eps: f64,
    pub eps1: f64,
    pub delta_b: f64,
}

/// `(eps - eps1) / 2`, the largest margin leaving slack on both sides.
pub fn default_delta_b(eps: f64, eps1: f64) -> f64 {
    0.5 * (eps - eps1)
}

impl GeometrySpec {
    /// Validates `0 < eps1 < eps`, `0 < delta_b <= eps - eps1`, `H^eps` inside
    /// `B` and `B` inside `G`.
    pub fn new(
        attractor: Attractor,
        b: Region,
        g: Region,
        eps: f64,
        eps1: f64,
        delta_b: f64,
    ) -> Result<Self> {
        let geom = Self::unchecked(attractor, b, g, eps, eps1, delta_b)?;
        if let Attractor::Points(pts) = &geom.attractor {
            for p in pts {
                let nb = Region::ball(p.clone(), geom.eps)?;
                if !nb.is_subset_of(&geom.b) {
                    return domain(format!("eps-neighbourhood of {p:?} is not inside B"));
                }
            }
        }
        if !geom.b.is_subset_of(&geom.g) {
            return domain("B is not inside G");
        }
        Ok(geom)
    }

    /// Checks only the radii; used for experiments that place `B` away from
    /// the attractor on purpose.
    pub fn unchecked(
        attractor: Attractor,
        b: Region,
        g: Region,
        eps: f64,
        eps1: f64,
        delta_b: f64,
    ) -> Result<Self> {
        if !(eps1 > 0.0 && eps1 < eps) {
            return domain(format!(
                "need 0 < eps1 < eps, got eps1 = {eps1}, eps = {eps}"
            ));
        }
        if !(delta_b > 0.0 && delta_b <= eps - eps1 + 1e-15) {
            return domain(format!(
                "need 0 < delta_B <= eps - eps1 = {}, got {delta_b}",
                eps - eps1
            ));
        }
        if b.dim() != g.dim() {
            return domain("B and G have different dimensions");
        }
        if !b.is_bounded() {
            return domain("B must be bounded");
        }
        if let Attractor::Points(pts) = &attractor {
            if pts.is_empty() || pts.iter().any(|p| p.len() != b.dim()) {
                return domain("attractor points must be nonempty and match the dimension of B");
            }
        }
        Ok(Self {
            attractor,
            b,
            g,
            eps,
            eps1,
            delta_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    pub fn dist_to_h(&self, x: &[f64]) -> f64 {
        self.attractor.distance(x)
    }
}

/// `h(theta, out)` for the flow routines.
pub type VectorField<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);

/// Fixed-step RK4 solution with Hermite dense output.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub dim: usize,
    pub times: Vec<f64>,
    /// States at the knots, flattened.
    pub states: Vec<f64>,
    derivs: Vec<f64>,
}

impl FlowSolution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Cubic Hermite interpolation between knots; clamped to the span.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.state(0).to_vec();
        }
        if t >= self.times[n - 1] {
            return self.last().to_vec();
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        self.hermite(i, t)
    }

    fn hermite(&self, i: usize, t: f64) -> Vec<f64> {
        let d = self.dim;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        (0..d)
            .map(|c| {
                h00 * self.states[i * d + c]
                    + h10 * h * self.derivs[i * d + c]
                    + h01 * self.states[(i + 1) * d + c]
                    + h11 * h * self.derivs[(i + 1) * d + c]
            })
            .collect()
    }
}

/// One classical RK4 step of length `dt` in place.
pub(crate) fn rk4_step(h: VectorField<'_>, x: &mut [f64], dt: f64, k: &mut [Vec<f64>; 5]) {
    let d = x.len();
    let [k1, k2, k3, k4, tmp] = k;
    h(x, k1);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    h(tmp, k2);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    h(tmp, k3);
    for i in 0..d {
        tmp[i] = x[i] + dt * k3[i];
    }
    h(tmp, k4);
    for i in 0..d {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

pub(crate) fn rk4_work(d: usize) -> [Vec<f64>; 5] {
    std::array::from_fn(|_| vec![0.0; d])
}

/// Integrates `theta' = h(theta)` from `t_span.0` to `t_span.1` with fixed
/// step `dt` (the last step is shortened to land on the end point).
pub fn flow(
    h: VectorField<'_>,
    theta0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<FlowSolution> {
    let (t0, t1) = t_span;
    if !(dt > 0.0) || !(t1 >= t0) {
        return domain("flow needs dt > 0 and t_end >= t_start");
    }
    let d = theta0.len();
    let steps = ((t1 - t0) / dt - 1e-9).ceil().max(0.0) as usize;
    let mut sol = FlowSolution {
        dim: d,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity((steps + 1) * d),
        derivs: Vec::with_capacity((steps + 1) * d),
    };
    let mut x = theta0.to_vec();
    let mut dx = vec![0.0; d];
    let mut work = rk4_work(d);
    h(&x, &mut dx);
    sol.times.push(t0);
    sol.states.extend_from_slice(&x);
    sol.derivs.extend_from_slice(&dx);
    for i in 0..steps {
        let ta = t0 + i as f64 * dt;
        let tb = if i + 1 == steps {
            t1
        } else {
            t0 + (i + 1) as f64 * dt
        };
        rk4_step(h, &mut x, tb - ta, &mut work);
        let norm = norm2(&x);
        if !norm.is_finite() || norm > ESCAPE_NORM {
            return Err(Error::FlowBlowUp { escape_time: tb });
        }
        h(&x, &mut dx);
        sol.times.push(tb);
        sol.states.extend_from_slice(&x);
        sol.derivs.extend_from_slice(&dx);
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HorizonOptions {
    pub grid_density: usize,
    pub dt: f64,
    pub t_max: f64,
    pub safety: f64,
}

impl Default for HorizonOptions {
    fn default() -> Self {
        Self {
            grid_density: 21,
            dt: 1e-3,
            t_max: 1e3,
            safety: 1.1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonReport {
    /// Safety factor times the largest entry time.
    pub t: f64,
    pub max_entry_time: f64,
    pub worst_start: Vec<f64>,
    pub grid_points: usize,
    pub safety: f64,
}

/// First time the flow from `start` enters the closed `eps1`-neighbourhood
/// of `H`, refined by bisection on the dense output.
fn entry_time(
    h: VectorField<'_>,
    geom: &GeometrySpec,
    start: &[f64],
    opts: &HorizonOptions,
) -> Result<f64> {
    let inside = |x: &[f64]| geom.dist_to_h(x) <= geom.eps1;
    if inside(start) {
        return Ok(0.0);
    }
    let d = start.len();
    let mut x = start.to_vec();
    let mut dx = vec![0.0; d];
    let mut work = rk4_work(d);
    let mut t = 0.0;
    h(&x, &mut dx);
    while t < opts.t_max {
        let prev = x.clone();
        let prev_dx = dx.clone();
        let step = opts.dt.min(opts.t_max - t);
        rk4_step(h, &mut x, step, &mut work);
        let norm = norm2(&x);
        if !norm.is_finite() || norm > ESCAPE_NORM {
            return Err(Error::FlowBlowUp {
                escape_time: t + step,
            });
        }
        h(&x, &mut dx);
        if inside(&x) {
            let local = FlowSolution {
                dim: d,
                times: vec![t, t + step],
                states: [prev, x].concat(),
                derivs: [prev_dx, dx].concat(),
            };
            let (mut lo, mut hi) = (t, t + step);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(&local.hermite(0, mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(hi);
        }
        t += step;
    }
    Err(Error::BasinViolation {
        start: start.to_vec(),
        t_max: opts.t_max,
    })
}

/// Grid estimate of the time every flow started in `B` needs to reach the
/// `eps1`-neighbourhood of `H`, inflated by the safety factor.
pub fn horizon_t(
    geom: &GeometrySpec,
    h: VectorField<'_>,
    opts: &HorizonOptions,
) -> Result<HorizonReport> {
    if !(opts.dt > 0.0 && opts.t_max > 0.0 && opts.safety >= 1.0) {
        return domain("horizon options need dt > 0, t_max > 0, safety >= 1");
    }
    let grid = geom.b.grid(opts.grid_density)?;
    let times: Vec<Result<f64>> = grid
        .par_iter()
        .map(|p| entry_time(h, geom, p, opts))
        .collect();
    let mut worst = 0usize;
    let mut max_t = 0.0_f64;
    for (i, t) in times.into_iter().enumerate() {
        let t = t?;
        if t > max_t {
            max_t = t;
            worst = i;
        }
    }
    Ok(HorizonReport {
        t: max_t * opts.safety,
        max_entry_time: max_t,
        worst_start: grid[worst].clone(),
        grid_points: grid.len(),
        safety: opts.safety,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConstantsCL {
    pub c: f64,
    pub l: f64,
    /// True when `L` came from finite differences rather than the caller.
    pub l_estimated: bool,
}

/// `C`: largest `|h|` along the flows from the `B` grid over `[0, T + 1]`
/// (times 1.05). `L`: the declared value, or the largest secant slope of `h`
/// over pairs of grid points (times 1.5).
pub fn constants_cl(
    geom: &GeometrySpec,
    h: VectorField<'_>,
    t: f64,
    declared_l: Option<f64>,
    opts: &HorizonOptions,
) -> Result<ConstantsCL> {
    let grid = geom.b.grid(opts.grid_density)?;
    let c_vals: Vec<Result<f64>> = grid
        .par_iter()
        .map(|p| {
            let sol = flow(h, p, (0.0, t + 1.0), opts.dt)?;
            let mut buf = vec![0.0; p.len()];
            let mut best = 0.0_f64;
            for i in 0..sol.len() {
                h(sol.state(i), &mut buf);
                best = best.max(norm2(&buf));
            }
            Ok(best)
        })
        .collect();
    let mut c = 0.0_f64;
    for v in c_vals {
        c = c.max(v?);
    }
    let (l, l_estimated) = match declared_l {
        Some(l) => (l, false),
        None => (1.5 * secant_lipschitz(h, &grid), true),
    };
    Ok(ConstantsCL {
        c: 1.05 * c,
        l,
        l_estimated,
    })
}

fn secant_lipschitz(h: VectorField<'_>, pts: &[Vec<f64>]) -> f64 {
    let d = pts.first().map(|p| p.len()).unwrap_or(0);
    let values: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            let mut out = vec![0.0; d];
            h(p, &mut out);
            out
        })
        .collect();
    // all pairs for small grids, nearest neighbours within a window otherwise
    let window = if pts.len() <= 1500 {
        pts.len()
    } else {
        4 * d + 4
    };
    let mut best = 0.0_f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len().min(i + 1 + window) {
            let gap = dist2(&pts[i], &pts[j]);
            if gap > 0.0 {
                best = best.max(dist2(&values[i], &values[j]) / gap);
            }
        }
    }
    best
}

/// Segment boundaries `n_0 < n_1 < ...` with `t(n_m) - t(n_{m-1}) >= T`.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentPartition {
    pub n0: u64,
    pub t: f64,
    pub boundaries: Vec<u64>,
    /// `T_m = t(n_m)`, measured from the schedule offset.
    pub times: Vec<f64>,
    /// `t(n_{m+1}) - t(n_m)` per segment, summed directly.
    pub lengths: Vec<f64>,
}

impl SegmentPartition {
    pub fn segments(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    /// Largest `m` with `T_m <= time`.
    pub fn last_boundary_before(&self, time: f64) -> Option<usize> {
        let k = self.times.partition_point(|&x| x <= time);
        k.checked_sub(1)
    }

    /// Segment containing step index `n`.
    pub fn segment_of(&self, n: u64) -> Option<usize> {
        let k = self.boundaries.partition_point(|&b| b <= n);
        if k == 0 || k >= self.boundaries.len() {
            None
        } else {
            Some(k - 1)
        }
    }
}

/// Builds `segments` consecutive segments of length at least `T` from `n0`.
pub fn partition(
    sched: &StepSchedule,
    n0: u64,
    t: f64,
    segments: usize,
) -> Result<SegmentPartition> {
    if !(t > 0.0 && t.is_finite()) {
        return domain(format!(
            "segment length T = {t} must be positive and finite"
        ));
    }
    let start_time = sched.t_of(n0)?;
    let mut boundaries = vec![n0];
    let mut times = vec![start_time];
    let mut lengths = Vec::with_capacity(segments);
    let mut global = CompensatedSum::new();
    global.add(start_time);
    let mut n = n0;
    for _ in 0..segments {
        let mut seg = CompensatedSum::new();
        while seg.value() < t {
            let a = sched.step(n)?;
            seg.add(a);
            global.add(a);
            n += 1;
        }
        boundaries.push(n);
        times.push(global.value());
        lengths.push(seg.value());
    }
    Ok(SegmentPartition {
        n0,
        t,
        boundaries,
        times,
        lengths,
    })
}

/// One row of the deviation report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SegmentDeviation {
    pub m: usize,
    pub n_m: u64,
    pub t_m: f64,
    pub rho: f64,
    /// `sup |theta_bar|` over the segment
    pub segment_sup_norm: f64,
    /// Bound on what the mesh misses between knots: `L C dt^2 / 8`.
    pub interpolation_bound: f64,
}

/// `rho_m`: sup distance between the interpolated iterates and the flow
/// restarted at each segment start.
///
/// Each step interval `[t(n), t(n+1)]` is split into `ceil(a(n)/dt)` equal RK4
/// substeps so the mesh contains every iterate time. `lc` = `(L, C)` sizes the
/// between-knot term; without it the term is reported as NaN.
pub fn rho_deviations(
    traj: &crate::engine::TrajectoryRecord,
    part: &SegmentPartition,
    sched: &StepSchedule,
    h: VectorField<'_>,
    dt: f64,
    lc: Option<(f64, f64)>,
) -> Result<Vec<SegmentDeviation>> {
    if traj.stride != 1 {
        return domain("deviation needs an unthinned trajectory (stride 1)");
    }
    if !(dt > 0.0) {
        return domain("dt must be positive");
    }
    let d = traj.dim;
    let first = traj.n_start;
    let last = traj.indices.last().copied().unwrap_or(first);
    let mut out = Vec::new();
    let mut work = rk4_work(d);
    let mut x = vec![0.0; d];
    for m in 0..part.segments() {
        let (nm, nnext) = (part.boundaries[m], part.boundaries[m + 1]);
        if nm < first || nnext > last {
            if out.is_empty() {
                return domain(format!(
                    "trajectory covers [{first}, {last}] but segment {m} spans [{nm}, {nnext}]"
                ));
            }
            break;
        }
        let base = (nm - first) as usize;
        x.copy_from_slice(traj.theta(base));
        let mut rho = 0.0_f64;
        let mut sup = norm2(&x);
        let mut max_sub = 0.0_f64;
        for n in nm..nnext {
            let a = sched.step(n)?;
            let i = (n - first) as usize;
            let (p, q) = (traj.theta(i), traj.theta(i + 1));
            let subs = (a / dt).ceil().max(1.0) as usize;
            let sub = a / subs as f64;
            max_sub = max_sub.max(sub);
            for j in 1..=subs {
                rk4_step(h, &mut x, sub, &mut work);
                let w = j as f64 / subs as f64;
                let mut dev = 0.0;
                let mut nb = 0.0;
                for c in 0..d {
                    let bar = p[c] + w * (q[c] - p[c]);
                    dev += (bar - x[c]) * (bar - x[c]);
                    nb += bar * bar;
                }
                rho = rho.max(dev.sqrt());
                sup = sup.max(nb.sqrt());
            }
        }
        out.push(SegmentDeviation {
            m,
            n_m: nm,
            t_m: part.times[m],
            rho,
            segment_sup_norm: sup,
            interpolation_bound: lc.map_or(f64::NAN, |(l, c)| l * c * max_sub * max_sub / 8.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -v;
        }
    }

    fn double_well(x: &[f64], out: &mut [f64]) {
        out[0] = x[0] - x[0].powi(3);
    }

    #[test]
    fn rk4_matches_exponential_and_has_fourth_order() {
        let sol = flow(&decay, &[1.0], (0.0, 1.0), 1e-3).unwrap();
        assert!((sol.last()[0] - (-1.0f64).exp()).abs() < 1e-8);
        let err = |dt: f64| {
            (flow(&decay, &[1.0], (0.0, 1.0), dt).unwrap().last()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
        // dense output between knots
        let mid = sol.at(0.5005);
        assert!((mid[0] - (-0.5005f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_field_is_constant_and_double_well_settles() {
        let zero = |_x: &[f64], o: &mut [f64]| o.iter_mut().for_each(|v| *v = 0.0);
        let sol = flow(&zero, &[0.3, -2.0], (0.0, 5.0), 0.1).unwrap();
        assert_eq!(sol.last(), &[0.3, -2.0]);
        let sol = flow(&double_well, &[0.5], (0.0, 30.0), 1e-2).unwrap();
        assert!((sol.last()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn blow_up_reports_escape_time() {
        let sq = |x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0];
        match flow(&sq, &[1.0], (0.0, 2.0), 1e-3) {
            Err(Error::FlowBlowUp { escape_time }) => assert!((escape_time - 1.0).abs() < 0.01),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn unit_ball_geometry() -> GeometrySpec {
        GeometrySpec::new(
            Attractor::Points(vec![vec![0.0]]),
            Region::ball(vec![0.0], 1.0).unwrap(),
            Region::everything(1),
            0.5,
            0.1,
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn horizon_for_linear_decay() {
        let rep = horizon_t(&unit_ball_geometry(), &decay, &HorizonOptions::default()).unwrap();
        assert!((rep.t - 1.1 * 10f64.ln()).abs() < 1e-9, "{}", rep.t);
        assert_eq!(rep.worst_start.len(), 1);
        assert_eq!(rep.worst_start[0].abs(), 1.0);
    }

    #[test]
    fn horizon_zero_when_b_inside_target() {
        let geom = GeometrySpec::unchecked(
            Attractor::Points(vec![vec![0.0]]),
            Region::ball(vec![0.0], 0.05).unwrap(),
            Region::everything(1),
            0.5,
            0.1,
            0.2,
        )
        .unwrap();
        let rep = horizon_t(&geom, &decay, &HorizonOptions::default()).unwrap();
        assert_eq!(rep.max_entry_time, 0.0);
    }

    #[test]
    fn horizon_for_double_well_against_closed_form() {
        let geom = GeometrySpec::new(
            Attractor::Points(vec![vec![1.0]]),
            Region::interval(0.5, 1.5).unwrap(),
            Region::cuboid(vec![0.0], vec![f64::INFINITY]).unwrap(),
            0.45,
            0.05,
            0.2,
        )
        .unwrap();
        let rep = horizon_t(&geom, &double_well, &HorizonOptions::default()).unwrap();
        // theta(t)^2 = 1 / (1 + (1/theta0^2 - 1) e^{-2t}) from theta0 = 0.5 to 0.95
        let exact = 0.5 * ((1.0 / 0.25 - 1.0) / (1.0 / 0.9025 - 1.0f64)).ln();
        assert!(
            (rep.max_entry_time - exact).abs() < 1e-9,
            "{} vs {exact}",
            rep.max_entry_time
        );
        assert_eq!(rep.worst_start, vec![0.5]);
    }

    #[test]
    fn basin_violation_detected() {
        let away = |x: &[f64], o: &mut [f64]| o[0] = -(x[0] - 3.0);
        let opts = HorizonOptions {
            t_max: 20.0,
            ..Default::default()
        };
        assert!(matches!(
            horizon_t(&unit_ball_geometry(), &away, &opts),
            Err(Error::BasinViolation { .. })
        ));
    }

    #[test]
    fn c_and_l_constants() {
        let geom = unit_ball_geometry();
        let cl = constants_cl(&geom, &decay, 2.5, None, &HorizonOptions::default()).unwrap();
        assert!((cl.c - 1.05).abs() < 1e-12);
        assert!((cl.l - 1.5).abs() < 1e-9 && cl.l_estimated);

        let zero = |_x: &[f64], o: &mut [f64]| o[0] = 0.0;
        let cl = constants_cl(&geom, &zero, 1.0, None, &HorizonOptions::default()).unwrap();
        assert_eq!((cl.c, cl.l), (0.0, 0.0));

        let geom = GeometrySpec::unchecked(
            Attractor::Points(vec![vec![1.0]]),
            Region::interval(0.5, 1.5).unwrap(),
            Region::everything(1),
            0.45,
            0.05,
            0.2,
        )
        .unwrap();
        let cl = constants_cl(&geom, &double_well, 2.0, None, &HorizonOptions::default()).unwrap();
        // secants near 1.5 approach |1 - 3 * 1.5^2| = 5.75
        assert!(cl.l >= 1.5 * 5.5 && cl.l <= 1.5 * 5.75, "{}", cl.l);
    }

    #[test]
    fn geometry_validation() {
        let b = Region::ball(vec![0.0], 1.0).unwrap();
        let pts = || Attractor::Points(vec![vec![0.0]]);
        assert!(GeometrySpec::new(pts(), b.clone(), Region::everything(1), 0.5, 0.6, 0.1).is_err());
        assert!(GeometrySpec::new(pts(), b.clone(), Region::everything(1), 0.5, 0.1, 0.5).is_err());
        assert!(GeometrySpec::new(pts(), b.clone(), Region::everything(1), 1.5, 0.1, 0.2).is_err());
        assert!(GeometrySpec::new(
            pts(),
            b,
            Region::ball(vec![0.0], 0.9).unwrap(),
            0.5,
            0.1,
            0.2
        )
        .is_err());
        assert_eq!(default_delta_b(0.5, 0.1), 0.2);
    }

    #[test]
    fn region_shapes() {
        let b = Region::cuboid(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert!(b.contains(&[0.5, 2.0]) && !b.contains(&[1.1, 0.0]));
        assert!((b.distance(&[2.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.sup_norm() - 5f64.sqrt()).abs() < 1e-15);
        assert!(b.is_subset_of(&Region::ball(vec![0.5, 1.0], 1.2).unwrap()));
        assert!(!b.is_subset_of(&Region::ball(vec![0.5, 1.0], 1.1).unwrap()));
        let g = b.grid(3).unwrap();
        assert_eq!(g.len(), 9);
        let ball = Region::ball(vec![0.0, 0.0], 1.0).unwrap();
        let g = ball.grid(5).unwrap();
        assert!(g.iter().all(|p| ball.contains(p)));
        assert!(g.contains(&vec![1.0, 0.0]) && g.contains(&vec![0.0, -1.0]));
        let mut rng = crate::rng::stream(4);
        for _ in 0..1000 {
            assert!(ball.contains(&ball.sample_uniform(&mut rng)));
        }
    }

    #[test]
    fn partition_examples() {
        let ex = StepSchedule::explicit(vec![0.1; 200])
            .unwrap()
            .with_offset(0)
            .unwrap();
        let p = partition(&ex, 0, 1.0, 5).unwrap();
        assert_eq!(p.boundaries, vec![0, 10, 20, 30, 40, 50]);
        assert!(partition(&ex, 0, 30.0, 1).is_err());

        let h = StepSchedule::power_law(1.0).unwrap();
        let p = partition(&h, 1, 1.0, 4).unwrap();
        assert_eq!(p.boundaries[1], 2);
        for m in 0..p.segments() {
            let len = h.t_between(p.boundaries[m], p.boundaries[m + 1]).unwrap();
            let last = h.step(p.boundaries[m + 1] - 1).unwrap();
            assert!(len >= 1.0 && len <= 1.0 + last + 1e-12);
        }
        assert_eq!(p.segment_of(2), Some(1));
        assert_eq!(p.last_boundary_before(p.times[2] + 1e-9), Some(2));
    }
}
