//! Closed-form probability bounds and the constants feeding them.
//!
//! The lock-in bound for `P(theta_bar -> H | theta_{n0} in B)` is
//!
//! ```text
//! 1 - 2d exp(-K_hat delta^2 / (d s(n0))) - 2d exp(-C_hat delta^2 / (d s(n0))) - 2 nu
//! K_hat = 1 / (factor K_T^2 C0^2),  K_T = e^{L T},  C0 = 2 C_R (1 + C_bar)
//! ```
//!
//! with `factor = 32` in scaled mode and `128` in classical mode (the maximal
//! Azuma inequality applied with `lambda = delta / (8 K_T sqrt d)` and
//! increments `C0 a(j)` yields 128).

use serde::Serialize;

use crate::engine::TrajectoryRecord;
use crate::error::{domain, Error, Result};
use crate::numeric::{adaptive_simpson, norm2, CompensatedSum};
use crate::odeflow::{Region, SegmentPartition};
use crate::schedules::{ScheduleKind, StepSchedule};

/// Upper search limit for the `n0` thresholds.
pub const THRESHOLD_LIMIT: u64 = 1_000_000_000_000;

/// Which Azuma denominator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AzumaMode {
    /// `2 exp(-lambda^2 / (2 sum c_i^2))`
    Classical,
    /// Scale chosen so the lock-in exponent carries the factor 32.
    Scaled,
}

impl AzumaMode {
    pub fn denominator_scale(self) -> f64 {
        match self {
            AzumaMode::Classical => 2.0,
            AzumaMode::Scaled => 0.5,
        }
    }

    /// Factor in `K_hat = 1 / (factor K_T^2 C0^2)`.
    pub fn k_hat_factor(self) -> f64 {
        64.0 * self.denominator_scale()
    }
}

/// `min(1, 2 exp(-lambda^2 / (scale sum c_i^2)))`.
pub fn azuma_maximal(lambda: f64, increment_bounds: &[f64], mode: AzumaMode) -> Result<f64> {
    if !(lambda >= 0.0) {
        return domain(format!("lambda = {lambda} must be nonnegative"));
    }
    if increment_bounds.iter().any(|c| !(*c >= 0.0)) {
        return domain("increment bounds must be nonnegative");
    }
    let mut sq = CompensatedSum::new();
    for c in increment_bounds {
        sq.add(c * c);
    }
    Ok(azuma_from_square_sum(lambda, sq.value(), mode))
}

pub(crate) fn azuma_from_square_sum(lambda: f64, sum_sq: f64, mode: AzumaMode) -> f64 {
    if lambda == 0.0 {
        return 1.0;
    }
    if sum_sq == 0.0 {
        return 0.0;
    }
    let x = lambda * lambda / (mode.denominator_scale() * sum_sq);
    if x <= std::f64::consts::LN_2 {
        1.0
    } else {
        2.0 * (-x).exp()
    }
}

/// Where a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    User,
    Estimated,
    Default,
    Derived,
}

/// A constant with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tagged {
    pub value: f64,
    pub source: Provenance,
}

impl Tagged {
    pub fn user(value: f64) -> Self {
        Self {
            value,
            source: Provenance::User,
        }
    }

    pub fn estimated(value: f64) -> Self {
        Self {
            value,
            source: Provenance::Estimated,
        }
    }
}

/// Primary constants; everything else is derived.
#[derive(Debug, Clone, Serialize)]
pub struct BoundInputs {
    pub l: Tagged,
    pub c: Tagged,
    /// `sup |Y|`
    pub c_bar: Tagged,
    pub k: Tagged,
    pub k_prime: Tagged,
    pub c_r: Tagged,
    /// Defaults to `C_R (1 + C_bar)`.
    pub c_r_dprime: Option<Tagged>,
    pub t: Tagged,
    /// Defaults to `K_hat`, flagged uncalibrated.
    pub c_hat: Option<Tagged>,
    pub mode: AzumaMode,
    pub d: usize,
    pub delta_b: f64,
    /// `sup_{theta in B} |theta|`
    pub tilde_c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundConstants {
    pub l: Tagged,
    pub c: Tagged,
    pub c_bar: Tagged,
    pub k: Tagged,
    pub k_prime: Tagged,
    pub k_tilde: f64,
    pub c_r: Tagged,
    pub c_r_dprime: Tagged,
    pub t: Tagged,
    pub k_t: f64,
    pub c0: f64,
    pub k_hat: f64,
    pub c_hat: Tagged,
    pub c_hat_calibrated: bool,
    pub azuma_mode: AzumaMode,
    pub azuma_denominator_factor: f64,
    pub d: usize,
    pub delta_b: f64,
    pub tilde_c: f64,
    /// Segment stability constant `(tilde_C + K_tilde T) e^{K_tilde T}`.
    pub k_dprime: f64,
}

impl BoundConstants {
    pub fn derive(inp: &BoundInputs) -> Result<Self> {
        let named = [
            ("L", inp.l.value),
            ("C", inp.c.value),
            ("C_bar", inp.c_bar.value),
            ("K", inp.k.value),
            ("K'", inp.k_prime.value),
            ("C_R", inp.c_r.value),
            ("T", inp.t.value),
            ("tilde_C", inp.tilde_c),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!(
                    "constant {name} = {v} must be finite and nonnegative"
                ));
            }
        }
        if inp.d == 0 {
            return domain("dimension must be at least 1");
        }
        if !(inp.delta_b > 0.0) {
            return domain("delta_B must be positive");
        }
        let k_t = (inp.l.value * inp.t.value).exp();
        if !k_t.is_finite() {
            return Err(Error::Overflow("K_T = exp(L T)".into()));
        }
        let c0 = 2.0 * inp.c_r.value * (1.0 + inp.c_bar.value);
        let factor = inp.mode.k_hat_factor();
        let k_hat = 1.0 / (factor * k_t * k_t * c0 * c0);
        let k_tilde = inp.k.value.max(inp.k_prime.value);
        let c_r_dprime = inp.c_r_dprime.unwrap_or(Tagged {
            value: inp.c_r.value * (1.0 + inp.c_bar.value),
            source: Provenance::Derived,
        });
        let (c_hat, calibrated) = match inp.c_hat {
            Some(c) => (c, true),
            None => (
                Tagged {
                    value: k_hat,
                    source: Provenance::Default,
                },
                false,
            ),
        };
        let kt = k_tilde * inp.t.value;
        Ok(Self {
            l: inp.l,
            c: inp.c,
            c_bar: inp.c_bar,
            k: inp.k,
            k_prime: inp.k_prime,
            k_tilde,
            c_r: inp.c_r,
            c_r_dprime,
            t: inp.t,
            k_t,
            c0,
            k_hat,
            c_hat,
            c_hat_calibrated: calibrated,
            azuma_mode: inp.mode,
            azuma_denominator_factor: factor,
            d: inp.d,
            delta_b: inp.delta_b,
            tilde_c: inp.tilde_c,
            k_dprime: (inp.tilde_c + kt) * kt.exp(),
        })
    }

    /// Same constants with a different `delta_B`.
    pub fn with_delta_b(&self, delta_b: f64) -> Self {
        let mut c = self.clone();
        c.delta_b = delta_b;
        c
    }

    /// `2d exp(-delta^2 / (factor K_T^2 d C0^2 (s(n_m) - s(n_{m+1}))))`, the
    /// per-segment martingale deviation probability (clamped to 1).
    pub fn segment_probability(&self, segment_square_sum: f64) -> f64 {
        let d = self.d as f64;
        let lambda = self.delta_b / (8.0 * self.k_t * d.sqrt());
        let p = azuma_from_square_sum(
            lambda,
            self.c0 * self.c0 * segment_square_sum,
            self.azuma_mode,
        );
        (d * p).min(1.0)
    }

    /// Bound on the sum of `segment_probability` over any segments whose
    /// square sums add up to at most `tail_square_sum`, from
    /// `e^{-c/sigma} <= sigma / (e c)`.
    pub fn segment_tail_bound(&self, tail_square_sum: f64) -> f64 {
        let d = self.d as f64;
        let lambda = self.delta_b / (8.0 * self.k_t * d.sqrt());
        let c = lambda * lambda / (self.azuma_mode.denominator_scale() * self.c0 * self.c0);
        if c == 0.0 {
            return f64::INFINITY;
        }
        2.0 * d * tail_square_sum / (std::f64::consts::E * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Thresholds {
    pub n0_1: u64,
    pub n0_2: u64,
    pub n0_3: u64,
    pub n0: u64,
}

fn tail(sched: &StepSchedule, n: u64) -> Result<f64> {
    Ok(sched.s_tail(n, 1e-15)?.value)
}

/// The three threshold inequalities, each true once `n` is large enough.
pub fn threshold_conditions(
    consts: &BoundConstants,
    sched: &StepSchedule,
    n: u64,
) -> Result<[bool; 3]> {
    let half = consts.delta_b / 2.0;
    let eighth = consts.delta_b / (8.0 * consts.k_t);
    let s = tail(sched, n)?;
    let c1 =
        consts.c.value * sched.step(n)? + consts.k_t * consts.c.value * consts.l.value * s < half;
    let prev = n.saturating_sub(1).max(sched.offset());
    let c2 = 2.0 * consts.c_r_dprime.value * sched.step(prev)? < eighth;
    let c3 = consts.c_r.value * consts.k_tilde * consts.c_bar.value * s < eighth;
    Ok([c1, c2, c3])
}

fn smallest_satisfying<F>(start: u64, which: &str, holds: F) -> Result<u64>
where
    F: Fn(u64) -> Result<bool>,
{
    if holds(start)? {
        return Ok(start);
    }
    let mut lo = start;
    let mut hi = start.max(1);
    loop {
        hi = hi.saturating_mul(2);
        if hi > THRESHOLD_LIMIT {
            if holds(THRESHOLD_LIMIT)? {
                hi = THRESHOLD_LIMIT;
                break;
            }
            return Err(Error::ThresholdOverflow {
                which: which.into(),
                limit: THRESHOLD_LIMIT,
            });
        }
        if holds(hi)? {
            break;
        }
        lo = hi;
    }
    // holds(hi) and !holds(lo)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if holds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest index (not below the schedule offset) satisfying each threshold
/// inequality, found by doubling then bisection; the third condition uses
/// the full tail `s(n)` in place of the finite sum.
pub fn n0_thresholds(consts: &BoundConstants, sched: &StepSchedule) -> Result<Thresholds> {
    let start = sched.offset();
    let n0_1 = smallest_satisfying(start, "n0_1", |n| {
        Ok(threshold_conditions(consts, sched, n)?[0])
    })?;
    let n0_2 = smallest_satisfying(start, "n0_2", |n| {
        Ok(threshold_conditions(consts, sched, n)?[1])
    })?;
    let n0_3 = smallest_satisfying(start, "n0_3", |n| {
        Ok(threshold_conditions(consts, sched, n)?[2])
    })?;
    Ok(Thresholds {
        n0_1,
        n0_2,
        n0_3,
        n0: n0_1.max(n0_2).max(n0_3),
    })
}

/// `clamp(1 - 2d e^{-K_hat delta^2/(d s)} - 2d e^{-C_hat delta^2/(d s)} - 2 nu)`.
pub fn lockin_lower_bound(consts: &BoundConstants, s_n0: f64, nu: f64) -> Result<f64> {
    if !(s_n0 > 0.0) {
        return domain(format!("s(n0) = {s_n0} must be positive"));
    }
    if !(0.0..0.5).contains(&nu) {
        return domain(format!("nu = {nu} outside [0, 1/2)"));
    }
    let d = consts.d as f64;
    let dd = consts.delta_b * consts.delta_b;
    let first = 2.0 * d * (-consts.k_hat * dd / (d * s_n0)).exp();
    let second = 2.0 * d * (-consts.c_hat.value * dd / (d * s_n0)).exp();
    Ok((1.0 - first - second - 2.0 * nu).clamp(0.0, 1.0))
}

/// Everything the `bounds` report prints.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub thresholds: Thresholds,
    pub s_n0: f64,
    pub s_n0_error: f64,
    pub nu: f64,
    pub lockin_lower_bound: f64,
}

pub fn bound_report(consts: &BoundConstants, sched: &StepSchedule, nu: f64) -> Result<BoundReport> {
    let thresholds = n0_thresholds(consts, sched)?;
    let s = sched.s_tail(thresholds.n0, 1e-15)?;
    Ok(BoundReport {
        constants: consts.clone(),
        thresholds,
        s_n0: s.value,
        s_n0_error: s.error,
        nu,
        lockin_lower_bound: lockin_lower_bound(consts, s.value, nu)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesReport {
    pub finite: bool,
    /// Terms from the schedule offset through `last`.
    pub partial_sum: f64,
    /// Certified bound on the remaining terms.
    pub tail_bound: f64,
    pub last: u64,
    pub within_tol: bool,
}

impl SeriesReport {
    pub fn upper(&self) -> f64 {
        self.partial_sum + self.tail_bound
    }
}

/// `c sum_n a(n)^2 (1 + [|theta_0| + K t(n)]^2 e^{2 K t(n)})` for log-power
/// steps, with `t(n)` the step sum from the offset and `K = k_tilde`.
///
/// Beyond the partial sum the step sum is dominated by
/// `U(x) = t(N) + F(x - 1) - F(N - 1)` with `F` the antiderivative of `a`,
/// which makes the remaining terms a decreasing function of `x` once
/// `2 x U'(x) (K / (|theta_0| + K U) + K) < 2`; the tail is then bounded by
/// `g(N) + int_N^inf g`, integrated in `u = ln x`.
pub fn tightness_series(
    sched: &StepSchedule,
    k_tilde: f64,
    theta0_norm: f64,
    c: f64,
    n_max: u64,
    tol: f64,
) -> Result<SeriesReport> {
    let p = match sched.kind() {
        ScheduleKind::LogPower { p } => *p,
        ScheduleKind::PowerLaw { k } => {
            return Err(Error::SeriesDiverges(format!(
                "the tightness series does not converge for a(n) = n^-{k}"
            )))
        }
        ScheduleKind::Explicit { .. } => {
            return Err(Error::SeriesDiverges(
                "explicit schedules have no tail model".into(),
            ))
        }
    };
    if !(k_tilde >= 0.0 && theta0_norm >= 0.0 && c >= 0.0 && tol > 0.0) {
        return domain("tightness series needs K, |theta_0|, c >= 0 and tol > 0");
    }
    let start = sched.offset();
    if k_tilde == 0.0 {
        let s = sched.s_tail(start, tol.min(1e-12))?;
        let scale = c * (1.0 + theta0_norm * theta0_norm);
        return Ok(SeriesReport {
            finite: true,
            partial_sum: scale * s.value,
            tail_bound: scale * s.error,
            last: start,
            within_tol: scale * s.error <= tol,
        });
    }

    let antider = |x: f64| -> f64 {
        if p == 1.0 {
            x.ln().ln()
        } else {
            x.ln().powf(1.0 - p) / (1.0 - p)
        }
    };
    let a_of = |x: f64| 1.0 / (x * x.ln().powf(p));
    let term = |x: f64, t: f64| {
        let a = a_of(x);
        let b = theta0_norm + k_tilde * t;
        let e = (2.0 * k_tilde * t).exp();
        a * a * (1.0 + b * b * e)
    };
    // x U'(x) (K/(|theta0| + K U) + K); must be < 1 for decay, <= 1/4 for the u-tail
    let slope = |x: f64, u: f64| {
        let du = 1.0 / ((x - 1.0) * (x - 1.0).ln().powf(p));
        x * du * (k_tilde / (theta0_norm + k_tilde * u) + k_tilde)
    };

    let mut partial = CompensatedSum::new();
    let mut t = CompensatedSum::new();
    let mut n = start;
    let n_end = n_max.max(start + 1);
    while n < n_end {
        partial.add(term(n as f64, t.value()));
        t.add(sched.step(n)?);
        n += 1;
    }
    // extend until the tail model applies (n >= 3 so that ln(n - 1) > 0)
    loop {
        let ok = n >= 3 && slope(n as f64, t.value()) < 1.0;
        if ok {
            break;
        }
        if n > 1_000_000_000 {
            return Ok(SeriesReport {
                finite: false,
                partial_sum: partial.value(),
                tail_bound: f64::INFINITY,
                last: n - 1,
                within_tol: false,
            });
        }
        partial.add(term(n as f64, t.value()));
        t.add(sched.step(n)?);
        n += 1;
    }
    let big_n = n as f64;
    let t_n = t.value();
    let f_base = antider(big_n - 1.0);
    let u_of = |x: f64| t_n + antider(x - 1.0) - f_base;
    let g = |x: f64| term(x, u_of(x));
    // integrand in u = ln x
    let gu = |u: f64| {
        let x = u.exp();
        g(x) * x
    };
    let lo = big_n.ln();
    let mut cut = lo + 1.0;
    while slope(cut.exp(), u_of(cut.exp())) > 0.25 {
        cut = lo + 2.0 * (cut - lo);
        if cut > 700.0 {
            return Ok(SeriesReport {
                finite: false,
                partial_sum: partial.value(),
                tail_bound: f64::INFINITY,
                last: n - 1,
                within_tol: false,
            });
        }
    }
    // past the cut d ln(gu)/du <= -1 + 2 * 1/4 = -1/2
    let body = adaptive_simpson(&gu, lo, cut, 1e-3 * tol);
    let tail_bound = g(big_n) + body + 1e-3 * tol + 2.0 * gu(cut);
    Ok(SeriesReport {
        finite: tail_bound.is_finite(),
        partial_sum: c * partial.value(),
        tail_bound: c * tail_bound,
        last: n - 1,
        within_tol: c * tail_bound <= tol,
    })
}

/// `f(n) e^{L sum_{m <= n} a_m}` with `a` indexed from 0.
pub fn gronwall_bound<F: Fn(u64) -> f64>(f_of_n: F, l: f64, a: &[f64], n: usize) -> Result<f64> {
    if !(l >= 0.0) {
        return domain("Gronwall constant L must be nonnegative");
    }
    if n >= a.len() {
        return domain(format!("need a_0..a_{n}, got {} values", a.len()));
    }
    if a[..=n].iter().any(|x| !(*x > 0.0)) {
        return domain("step sizes must be positive");
    }
    let mut s = CompensatedSum::new();
    for x in &a[..=n] {
        s.add(*x);
    }
    Ok(f_of_n(n as u64) * (l * s.value()).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityCheck {
    pub segments_checked: usize,
    pub violations: usize,
    pub max_norm: f64,
}

/// On every segment whose start iterate lies in `B`, checks
/// `|theta_j| <= k_dprime` up to and including the next boundary.
pub fn segment_stability_check(
    traj: &TrajectoryRecord,
    part: &SegmentPartition,
    b: &Region,
    k_dprime: f64,
) -> Result<StabilityCheck> {
    if traj.stride != 1 {
        return domain("stability check needs an unthinned trajectory");
    }
    let first = traj.n_start;
    let last = traj.indices.last().copied().unwrap_or(first);
    let mut out = StabilityCheck {
        segments_checked: 0,
        violations: 0,
        max_norm: 0.0,
    };
    for m in 0..part.segments() {
        let (s, e) = (part.boundaries[m], part.boundaries[m + 1]);
        if s < first || e > last {
            break;
        }
        if !b.contains(traj.theta((s - first) as usize)) {
            continue;
        }
        out.segments_checked += 1;
        for j in s..=e {
            let norm = norm2(traj.theta((j - first) as usize));
            out.max_norm = out.max_norm.max(norm);
            if norm > k_dprime {
                out.violations += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(mode: AzumaMode) -> BoundInputs {
        BoundInputs {
            l: Tagged::user(1.0),
            c: Tagged::user(1.0),
            c_bar: Tagged::user(0.1),
            k: Tagged::user(1.1),
            k_prime: Tagged::user(0.05),
            c_r: Tagged::user(0.5),
            c_r_dprime: None,
            t: Tagged::user(2.0),
            c_hat: None,
            mode,
            d: 1,
            delta_b: 0.2,
            tilde_c: 1.5,
        }
    }

    #[test]
    fn azuma_examples() {
        assert_eq!(
            azuma_maximal(0.0, &[1.0], AzumaMode::Classical).unwrap(),
            1.0
        );
        let p = azuma_maximal(2.0, &[1.0], AzumaMode::Classical).unwrap();
        assert!((p - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(
            azuma_maximal(1.0, &[0.0, 0.0], AzumaMode::Scaled).unwrap(),
            0.0
        );
        // clamp boundary: lambda^2 = scale * sum c^2 * ln 2
        let lam = (2.0 * std::f64::consts::LN_2).sqrt();
        assert_eq!(
            azuma_maximal(lam, &[1.0], AzumaMode::Classical).unwrap(),
            1.0
        );
        assert!(azuma_maximal(lam * 1.001, &[1.0], AzumaMode::Classical).unwrap() < 1.0);
        assert!(azuma_maximal(-1.0, &[1.0], AzumaMode::Classical).is_err());
    }

    #[test]
    fn segment_tail_dominates_split_sums() {
        let c = BoundConstants::derive(&inputs(AzumaMode::Classical)).unwrap();
        // tiny square sums so the probabilities are far below the clamp
        let sigmas = [3e-7, 5e-7, 1e-6, 4e-7];
        let total: f64 = sigmas.iter().sum();
        let summed: f64 = sigmas.iter().map(|&s| c.segment_probability(s)).sum();
        assert!(summed > 0.0);
        assert!(summed <= c.segment_tail_bound(total));
        assert_eq!(c.segment_tail_bound(0.0), 0.0);
    }

    #[test]
    fn derived_constants() {
        let c = BoundConstants::derive(&inputs(AzumaMode::Scaled)).unwrap();
        assert!((c.k_t - 2f64.exp()).abs() < 1e-12 * c.k_t);
        assert!((c.c0 - 1.1).abs() < 1e-15);
        assert!((c.k_hat - 1.0 / (32.0 * c.k_t * c.k_t * 1.21)).abs() < 1e-15);
        assert_eq!(c.c_hat.value, c.k_hat);
        assert!(!c.c_hat_calibrated);
        assert!((c.c_r_dprime.value - 0.55).abs() < 1e-15);
        assert_eq!(c.c_r_dprime.source, Provenance::Derived);
        assert!((c.k_dprime - (1.5 + 2.2) * 2.2f64.exp()).abs() < 1e-12);
        let classical = BoundConstants::derive(&inputs(AzumaMode::Classical)).unwrap();
        assert!((classical.k_hat * 4.0 - c.k_hat).abs() < 1e-18);
    }

    #[test]
    fn tiny_constants_give_offset() {
        let mut inp = inputs(AzumaMode::Scaled);
        for t in [
            &mut inp.l,
            &mut inp.c,
            &mut inp.c_bar,
            &mut inp.k,
            &mut inp.k_prime,
            &mut inp.c_r,
        ] {
            *t = Tagged::user(0.001);
        }
        inp.t = Tagged::user(0.0);
        inp.c_r_dprime = Some(Tagged::user(0.001));
        inp.delta_b = 1.0;
        let c = BoundConstants::derive(&inp).unwrap();
        assert_eq!(c.k_t, 1.0);
        let th = n0_thresholds(&c, &StepSchedule::power_law(1.0).unwrap()).unwrap();
        assert_eq!(th.n0, 1);
    }

    #[test]
    fn thresholds_are_minimal_and_grow_as_delta_shrinks() {
        let c = BoundConstants::derive(&inputs(AzumaMode::Scaled)).unwrap();
        let sched = StepSchedule::power_law(0.75).unwrap();
        let th = n0_thresholds(&c, &sched).unwrap();
        for (i, n) in [th.n0_1, th.n0_2, th.n0_3].into_iter().enumerate() {
            assert!(threshold_conditions(&c, &sched, n).unwrap()[i]);
            if n > sched.offset() {
                assert!(!threshold_conditions(&c, &sched, n - 1).unwrap()[i]);
            }
        }
        let mut prev = th.n0;
        for delta in [0.1, 0.05, 0.02] {
            let n = n0_thresholds(&c.with_delta_b(delta), &sched).unwrap().n0;
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn threshold_overflow_reported() {
        let mut inp = inputs(AzumaMode::Scaled);
        inp.l = Tagged::user(30.0);
        let c = BoundConstants::derive(&inp).unwrap();
        let err = n0_thresholds(&c, &StepSchedule::power_law(0.75).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ThresholdOverflow { .. }), "{err:?}");
    }

    #[test]
    fn lockin_examples() {
        let c = BoundConstants::derive(&inputs(AzumaMode::Scaled)).unwrap();
        assert!((lockin_lower_bound(&c, 1e-300, 0.1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(lockin_lower_bound(&c, 1e6, 0.0).unwrap(), 0.0);
        // e^{-x} = 1/8 makes each subtracted term 2 e^{-x} = 1/4
        let s = c.k_hat * c.delta_b * c.delta_b / 8f64.ln();
        assert!((lockin_lower_bound(&c, s, 0.0).unwrap() - 0.5).abs() < 1e-14);
        // e^{-x} = 1/4 exhausts the bound
        let s = c.k_hat * c.delta_b * c.delta_b / 4f64.ln();
        assert!(lockin_lower_bound(&c, s, 0.0).unwrap().abs() < 1e-14);
        assert!(lockin_lower_bound(&c, 0.0, 0.0).is_err());
        assert!(lockin_lower_bound(&c, 1.0, 0.5).is_err());
    }

    #[test]
    fn tightness_series_cases() {
        let lp = StepSchedule::log_power(1.0).unwrap();
        let r = tightness_series(&lp, 0.0, 0.0, 1.0, 100, 1e-10).unwrap();
        let s2 = lp.s_tail(2, 1e-12).unwrap().value;
        assert!((r.partial_sum - s2).abs() < 1e-12 && r.finite);

        let r = tightness_series(&lp, 1.0, 1.0, 1.0, 100_000, 5e-3).unwrap();
        assert!(r.finite && r.within_tol, "{r:?}");
        let wider = tightness_series(&lp, 1.0, 1.0, 1.0, 1_000_000, 5e-3).unwrap();
        assert!(wider.tail_bound < r.tail_bound);
        // the longer partial sum must land inside the first certificate
        assert!(wider.partial_sum >= r.partial_sum && wider.partial_sum <= r.upper());

        let pl = StepSchedule::power_law(0.75).unwrap();
        assert!(matches!(
            tightness_series(&pl, 1.0, 1.0, 1.0, 100, 1e-3),
            Err(Error::SeriesDiverges(_))
        ));
    }

    #[test]
    fn gronwall_examples() {
        assert!((gronwall_bound(|_| 1.0, 1.0, &[0.5, 0.5], 1).unwrap() - 1f64.exp()).abs() < 1e-15);
        assert_eq!(
            gronwall_bound(|n| n as f64, 0.0, &[0.1; 5], 3).unwrap(),
            3.0
        );
        let v = gronwall_bound(|n| 1.0 + 0.1 * n as f64, 0.5, &[0.1; 11], 10).unwrap();
        assert!((v - 2.0 * 0.55f64.exp()).abs() < 1e-12);
    }
}
