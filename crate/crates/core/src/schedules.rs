//! Step-size schedules `a(n)`, the clock `t(n)`, tail sums `s(n)` and the
//! summability certificate used by the Borel–Cantelli argument.
//!
//! Three families are supported:
//!
//! ```text
//! PowerLaw(k):  a(n) = n^-k              1/2 < k <= 1, n >= 1
//! LogPower(p):  a(n) = 1 / (n (ln n)^p)  0 < p <= 1,   n >= 2
//! Explicit:     a(n) = values[n - offset]
//! ```
//!
//! `t(n)` is the cumulative step sum from the schedule offset up to `n - 1`
//! and `s(n)` is the tail `sum_{m >= n} a(m)^2`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::numeric::{adaptive_simpson, CompensatedSum};

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    PowerLaw {
        k: f64,
    },
    LogPower {
        p: f64,
    },
    Explicit {
        values: Arc<[f64]>,
        source: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    kind: ScheduleKind,
    offset: u64,
}

/// A tail sum together with a certified absolute error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailSum {
    pub value: f64,
    pub error: f64,
}

impl StepSchedule {
    pub fn power_law(k: f64) -> Result<Self> {
        if !(k > 0.5 && k <= 1.0) {
            return domain(format!("power-law exponent k = {k} outside (1/2, 1]"));
        }
        Ok(Self {
            kind: ScheduleKind::PowerLaw { k },
            offset: 1,
        })
    }

    pub fn log_power(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return domain(format!("log-power exponent p = {p} outside (0, 1]"));
        }
        Ok(Self {
            kind: ScheduleKind::LogPower { p },
            offset: 2,
        })
    }

    /// A user-supplied step sequence; `values[0]` is `a(1)` unless the offset
    /// is changed with [`StepSchedule::with_offset`].
    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        Self::explicit_from(values, None)
    }

    fn explicit_from(values: Vec<f64>, source: Option<PathBuf>) -> Result<Self> {
        if values.is_empty() {
            return domain("explicit schedule is empty");
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return domain(format!("explicit step {i} = {v} is not a positive real"));
            }
            if i > 0 && v > values[i - 1] {
                return domain(format!("explicit schedule increases at position {i}"));
            }
        }
        Ok(Self {
            kind: ScheduleKind::Explicit {
                values: values.into(),
                source,
            },
            offset: 1,
        })
    }

    /// Moves the first index. Power laws need `offset >= 1`, log-power
    /// schedules `offset >= 2`; explicit schedules accept 0.
    pub fn with_offset(mut self, offset: u64) -> Result<Self> {
        let min = self.min_offset();
        if offset < min {
            return domain(format!(
                "offset {offset} below minimum {min} for this schedule"
            ));
        }
        self.offset = offset;
        Ok(self)
    }

    fn min_offset(&self) -> u64 {
        match self.kind {
            ScheduleKind::PowerLaw { .. } => 1,
            ScheduleKind::LogPower { .. } => 2,
            ScheduleKind::Explicit { .. } => 0,
        }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// One past the last defined index for explicit schedules.
    pub fn end(&self) -> Option<u64> {
        match &self.kind {
            ScheduleKind::Explicit { values, .. } => Some(self.offset + values.len() as u64),
            _ => None,
        }
    }

    /// `a(n)`, or `None` when `n` is outside the schedule's support.
    #[inline]
    pub fn get(&self, n: u64) -> Option<f64> {
        if n < self.offset {
            return None;
        }
        match &self.kind {
            ScheduleKind::PowerLaw { k } => {
                let x = n as f64;
                Some(if *k == 1.0 { 1.0 / x } else { x.powf(-k) })
            }
            ScheduleKind::LogPower { p } => {
                let x = n as f64;
                Some(1.0 / (x * x.ln().powf(*p)))
            }
            ScheduleKind::Explicit { values, .. } => {
                values.get((n - self.offset) as usize).copied()
            }
        }
    }

    pub fn step(&self, n: u64) -> Result<f64> {
        if n < self.offset {
            return domain(format!(
                "step index {n} below schedule offset {}",
                self.offset
            ));
        }
        self.get(n).ok_or(Error::ScheduleExhausted { index: n })
    }

    /// `t(n) = sum_{m = offset}^{n-1} a(m)`, with `t(offset) = 0`.
    pub fn t_of(&self, n: u64) -> Result<f64> {
        self.t_between(self.offset, n)
    }

    /// `sum_{m = from}^{to-1} a(m)` with compensated summation.
    pub fn t_between(&self, from: u64, to: u64) -> Result<f64> {
        if from < self.offset || to < from {
            return domain(format!(
                "invalid range [{from}, {to}) for schedule with offset {}",
                self.offset
            ));
        }
        let mut acc = CompensatedSum::new();
        for m in from..to {
            acc.add(self.step(m)?);
        }
        Ok(acc.value())
    }

    /// `s(n0) = sum_{m >= n0} a(m)^2` to absolute accuracy `tol`.
    ///
    /// Power laws use Euler–Maclaurin with the `f'''` remainder bound, log-power
    /// schedules use the convexity bracket
    /// `[int_N f + f(N)/2, int_{N-1/2} f]` around the tail beyond `N`.
    pub fn s_tail(&self, n0: u64, tol: f64) -> Result<TailSum> {
        if n0 < self.offset {
            return domain(format!(
                "tail start {n0} below schedule offset {}",
                self.offset
            ));
        }
        if !(tol > 0.0) {
            return domain("tail tolerance must be positive");
        }
        match &self.kind {
            ScheduleKind::PowerLaw { k } => Ok(power_law_tail(*k, n0, tol)),
            ScheduleKind::LogPower { p } => Ok(log_power_tail(*p, n0, tol)),
            ScheduleKind::Explicit { values, .. } => {
                let start = ((n0 - self.offset) as usize).min(values.len());
                let mut acc = CompensatedSum::new();
                for v in &values[start..] {
                    acc.add(v * v);
                }
                Err(Error::NoTailModel {
                    prefix_sum: acc.value(),
                })
            }
        }
    }

    /// Parses `power:k=0.75`, `logpower:p=1.0` or `explicit:@file.csv`, each
    /// optionally followed by `,offset=N`. Relative explicit paths resolve
    /// against `base_dir`.
    pub fn parse(literal: &str, base_dir: Option<&Path>) -> Result<Self> {
        let literal = literal.trim();
        let (head, rest) = literal
            .split_once(':')
            .ok_or_else(|| Error::Domain(format!("schedule literal {literal:?} lacks ':'")))?;
        let mut parts = rest.split(',').map(str::trim);
        let first = parts.next().unwrap_or("");
        let sched = match head.trim() {
            "power" => Self::power_law(parse_param(first, "k")?)?,
            "logpower" => Self::log_power(parse_param(first, "p")?)?,
            "explicit" => {
                let path = first.strip_prefix('@').ok_or_else(|| {
                    Error::Domain(format!("explicit schedule needs '@file', got {first:?}"))
                })?;
                let path = match base_dir {
                    Some(dir) if Path::new(path).is_relative() => dir.join(path),
                    _ => PathBuf::from(path),
                };
                let values = read_step_file(&path)?;
                Self::explicit_from(values, Some(PathBuf::from(first.trim_start_matches('@'))))?
            }
            other => return domain(format!("unknown schedule kind {other:?}")),
        };
        match parts.next() {
            None => Ok(sched),
            Some(extra) => {
                let off = parse_param(extra, "offset")?;
                if off < 0.0 || off.fract() != 0.0 {
                    return domain(format!("offset must be a nonnegative integer, got {off}"));
                }
                sched.with_offset(off as u64)
            }
        }
    }

    /// Inverse of [`StepSchedule::parse`]. Explicit schedules built in memory
    /// have no file to point at and print a placeholder instead.
    pub fn literal(&self) -> String {
        let base = match &self.kind {
            ScheduleKind::PowerLaw { k } => format!("power:k={k}"),
            ScheduleKind::LogPower { p } => format!("logpower:p={p}"),
            ScheduleKind::Explicit { source, values } => match source {
                Some(path) => format!("explicit:@{}", path.display()),
                None => format!("explicit:<{} values>", values.len()),
            },
        };
        if self.offset == self.default_offset() {
            base
        } else {
            format!("{base},offset={}", self.offset)
        }
    }

    fn default_offset(&self) -> u64 {
        match self.kind {
            ScheduleKind::LogPower { .. } => 2,
            _ => 1,
        }
    }
}

fn parse_param(text: &str, key: &str) -> Result<f64> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Domain(format!("expected {key}=<value>, got {text:?}")))?;
    if k.trim() != key {
        return domain(format!("expected parameter {key:?}, got {:?}", k.trim()));
    }
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::Domain(format!("cannot parse {key} value {v:?}")))
}

/// One positive real per line; blank lines and `#` comments are skipped.
pub fn read_step_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            column: 1,
            message: format!("not a real number: {line:?}"),
        })?;
        out.push(v);
    }
    Ok(out)
}

fn power_law_tail(k: f64, n0: u64, tol: f64) -> TailSum {
    let two_k = 2.0 * k;
    let f = |x: f64| x.powf(-two_k);
    // |f'''(N)| / 720 <= tol / 2
    let c3 = two_k * (two_k + 1.0) * (two_k + 2.0);
    let n_tol = (2.0 * c3 / (720.0 * tol)).powf(1.0 / (two_k + 3.0)).ceil() as u64;
    let big_n = n_tol.max(n0).max(1);

    let mut acc = CompensatedSum::new();
    for n in n0..big_n {
        acc.add(f(n as f64));
    }
    let x = big_n as f64;
    let integral = x.powf(1.0 - two_k) / (two_k - 1.0);
    let d1 = -two_k * x.powf(-two_k - 1.0);
    acc.add(integral);
    acc.add(0.5 * f(x));
    acc.add(-d1 / 12.0);
    let remainder = c3 * x.powf(-two_k - 3.0) / 720.0;
    let value = acc.value();
    TailSum {
        value,
        error: remainder + 4.0 * f64::EPSILON * value,
    }
}

/// `int_x^inf dt / (t^2 (ln t)^{2p})`, computed as `int_{ln x}^inf e^-u u^-2p du`.
fn log_power_integral(p: f64, x: f64) -> f64 {
    let lo = x.ln();
    let g = |u: f64| (-u).exp() * u.powf(-2.0 * p);
    let width = 60.0;
    let scale = g(lo);
    let body = adaptive_simpson(&g, lo, lo + width, 1e-17 * scale.max(1e-300));
    // beyond lo + width the integrand is below g(lo + width) * e^-(u - lo - width)
    body + g(lo + width)
}

fn log_power_tail(p: f64, n0: u64, tol: f64) -> TailSum {
    let f = |x: f64| 1.0 / (x * x * x.ln().powf(2.0 * p));
    // half-width of the convexity bracket ~ |f'(N)| / 16 ~ 1/(8 N^3 ln^{2p} N)
    let bracket = |n: f64| {
        let near = adaptive_simpson(&f, n - 0.5, n, 1e-18 * f(n));
        (near - 0.5 * f(n)).max(0.0)
    };
    let mut big_n = ((1.0 / (4.0 * tol)).cbrt().ceil() as u64).max(n0).max(3);
    while 0.5 * bracket(big_n as f64) > 0.5 * tol {
        big_n = big_n + big_n / 2 + 1;
    }
    let mut acc = CompensatedSum::new();
    for n in n0..big_n {
        acc.add(f(n as f64));
    }
    let x = big_n as f64;
    let lower = log_power_integral(p, x) + 0.5 * f(x);
    let half = 0.5 * bracket(x);
    acc.add(lower + half);
    let value = acc.value();
    TailSum {
        value,
        error: half + 1e-15 * value + 4.0 * f64::EPSILON * value,
    }
}

/// Closed-form upper bound on `s(n)` for `a(n) = n^-k`:
/// `1 / ((2k - 1) (n/2)^(2k - 1))`.
pub fn s_tail_bound(k: f64, n: u64) -> Result<f64> {
    if !(k > 0.5 && k <= 1.0) {
        return domain(format!("k = {k} outside (1/2, 1]"));
    }
    if n < 2 {
        return domain(format!("tail bound needs n >= 2, got {n}"));
    }
    let beta = 2.0 * k - 1.0;
    Ok(1.0 / (beta * (n as f64 / 2.0).powf(beta)))
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub finite: bool,
    /// `sum_{n = n_start}^{last} 4 d exp(-C / s(n))`
    pub partial_sum: f64,
    /// Certified bound on everything after `last`.
    pub tail_bound: f64,
    pub last: u64,
    pub note: String,
}

impl CertificateReport {
    pub fn upper(&self) -> f64 {
        self.partial_sum + self.tail_bound
    }
}

const CERTIFICATE_TARGET: f64 = 1e-9;
const CERTIFICATE_LIMIT: u64 = 100_000_000;

/// Finiteness certificate for `sum_{n0} 4 d exp(-C / s(n0))`.
///
/// Partial sums run until the remainder bound drops below `1e-9`. For power
/// laws the remainder uses `s(n) <= 1/((2k-1)(n/2)^(2k-1))` and an
/// incomplete-gamma integral; for log-power steps `s(n) <= 1/(n-1)` once
/// `ln n >= 1`, which makes the remainder geometric.
pub fn summability_certificate(
    sched: &StepSchedule,
    c: f64,
    d: usize,
    n_start: u64,
) -> Result<CertificateReport> {
    if !(c > 0.0) {
        return domain(format!("certificate constant C = {c} must be positive"));
    }
    let dd = d as f64;
    let tail_bound_at = |n: u64| -> Option<f64> {
        match sched.kind() {
            ScheduleKind::PowerLaw { k } => {
                if n < 2 {
                    return None;
                }
                let beta = 2.0 * k - 1.0;
                let x = c * beta * (n as f64 / 2.0).powf(beta);
                let first = 4.0 * dd * (-x).exp();
                let a = 1.0 / beta;
                let upper_gamma =
                    statrs::function::gamma::gamma_ur(a, x) * statrs::function::gamma::gamma(a);
                let integral = 4.0 * dd * (2.0 / beta) * (c * beta).powf(-a) * upper_gamma;
                Some(first + integral)
            }
            ScheduleKind::LogPower { .. } => {
                if n < 3 {
                    return None;
                }
                Some(4.0 * dd * (-c * (n as f64 - 1.0)).exp() / (1.0 - (-c).exp()))
            }
            ScheduleKind::Explicit { .. } => None,
        }
    };

    if matches!(sched.kind(), ScheduleKind::Explicit { .. }) {
        return Ok(CertificateReport {
            finite: false,
            partial_sum: f64::NAN,
            tail_bound: f64::INFINITY,
            last: n_start,
            note: "explicit schedules carry no tail model".into(),
        });
    }

    let start = n_start.max(sched.offset());
    if let Some(tail) = tail_bound_at(CERTIFICATE_LIMIT + 1) {
        if tail >= CERTIFICATE_TARGET {
            return Ok(CertificateReport {
                finite: false,
                partial_sum: f64::NAN,
                tail_bound: tail,
                last: CERTIFICATE_LIMIT,
                note: format!(
                    "remainder bound at n = {} is {tail:e}, above {CERTIFICATE_TARGET}",
                    CERTIFICATE_LIMIT + 1
                ),
            });
        }
    }
    let mut s = sched.s_tail(start, 1e-15)?.value;
    let mut partial = CompensatedSum::new();
    let mut n = start;
    loop {
        partial.add(4.0 * dd * (-c / s).exp());
        let a = sched.step(n)?;
        n += 1;
        if n.is_multiple_of(4096) {
            s = sched.s_tail(n, 1e-15 * s)?.value;
        } else {
            s -= a * a;
        }
        // the remainder bound is decreasing in n, so sparse checks only delay the stop
        let check = n < 1024 || n.is_multiple_of(1024);
        if let Some(tail) = if check { tail_bound_at(n) } else { None } {
            if tail < CERTIFICATE_TARGET {
                return Ok(CertificateReport {
                    finite: true,
                    partial_sum: partial.value(),
                    tail_bound: tail,
                    last: n - 1,
                    note: String::new(),
                });
            }
        }
        if n > CERTIFICATE_LIMIT {
            return Ok(CertificateReport {
                finite: false,
                partial_sum: partial.value(),
                tail_bound: tail_bound_at(n).unwrap_or(f64::INFINITY),
                last: n - 1,
                note: format!("remainder still above {CERTIFICATE_TARGET} at n = {n}"),
            });
        }
    }
}
