//! Sample-complexity formulas for a contraction with Markov noise: the
//! closed-form `n0`, the iteration count `N'0`, the scan-based `N0`, the
//! horizon minimisation and the step-exponent sweep.

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::THRESHOLD_LIMIT;
use crate::error::{domain, Error, Result};
use crate::numeric::CompensatedSum;
use crate::schedules::StepSchedule;

/// Minimum of `(T + 1) / (1 - exp(-(1 - alpha) T))` at `alpha = 0.9`, as used
/// in the closed form for `N'0`.
pub const HORIZON_FACTOR: f64 = 15.16;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComplexityInputs {
    /// Aggregate constant standing in for every bound constant.
    pub m: f64,
    pub eps: f64,
    pub gamma: f64,
    pub k: f64,
    pub alpha: f64,
    pub d: usize,
}

impl ComplexityInputs {
    pub fn new(m: f64, eps: f64, gamma: f64, k: f64) -> Result<Self> {
        let inp = Self {
            m,
            eps,
            gamma,
            k,
            alpha: 0.9,
            d: 1,
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return domain(format!("M = {} must be positive", self.m));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return domain(format!("eps = {} must be positive", self.eps));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return domain(format!("gamma = {} outside (0, 1)", self.gamma));
        }
        if !(self.k > 0.5 && self.k < 1.0) {
            return domain(format!("k = {} outside (1/2, 1)", self.k));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return domain(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        if self.d == 0 {
            return domain("dimension must be at least 1");
        }
        Ok(())
    }

    /// Radius `3 eps / 2` of the neighbourhood used in the construction.
    pub fn radius(&self) -> f64 {
        1.5 * self.eps
    }
}

fn phi(alpha: f64, t: f64) -> f64 {
    (t + 1.0) / -(-(1.0 - alpha) * t).exp_m1()
}

/// Minimises `(T + 1) / (1 - exp(-(1 - alpha) T))` by golden section on
/// `[lo, hi]`.
pub fn t_star_bracketed(alpha: f64, lo: f64, hi: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("alpha = {alpha} outside (0, 1)"));
    }
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return domain("bracket must satisfy 0 < lo < hi");
    }
    let inv = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv * (b - a);
    let mut d = a + inv * (b - a);
    let (mut fc, mut fd) = (phi(alpha, c), phi(alpha, d));
    while b - a > 1e-7 * (1.0 + a.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv * (b - a);
            fc = phi(alpha, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv * (b - a);
            fd = phi(alpha, d);
        }
    }
    let t = 0.5 * (a + b);
    Ok((t, phi(alpha, t)))
}

/// `(T*, min value)` with a bracket wide enough for any `alpha`.
pub fn t_star(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("alpha = {alpha} outside (0, 1)"));
    }
    t_star_bracketed(alpha, 1e-6, 50.0 / (1.0 - alpha) + 10.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct N0Terms {
    pub terms: [f64; 6],
    pub dominant: usize,
    /// `max` of the terms before the ceiling.
    pub value: f64,
    pub n0: u64,
}

const TERM_NAMES: [&str; 6] = [
    "(M/eps)^(1/k)",
    "(M/(eps(2k-1)))^(1/(2k-1))",
    "(M/(eps^2(2k-1)))^(1/(2k-1))",
    "(M/eps)^(2/k)",
    "(M ln(1/gamma)/(eps^2(2k-1)))^(1/(2k-1))",
    "(2Mk/(eps(2k-1)))^(1/(2k-1))",
];

/// The six terms whose maximum is `n0`, in the order listed in
/// [`TERM_NAMES`](self).
pub fn n0_terms(inp: &ComplexityInputs) -> [f64; 6] {
    let ComplexityInputs {
        m, eps, gamma, k, ..
    } = *inp;
    let q = 2.0 * k - 1.0;
    let e = 1.0 / q;
    [
        (m / eps).powf(1.0 / k),
        (m / (eps * q)).powf(e),
        (m / (eps * eps * q)).powf(e),
        (m / eps).powf(2.0 / k),
        (m * (1.0 / gamma).ln() / (eps * eps * q)).powf(e),
        (2.0 * m * k / (eps * q)).powf(e),
    ]
}

/// `n0 = ceil(max of the six terms)`, at least 1.
pub fn n0_closed_form(inp: &ComplexityInputs) -> Result<N0Terms> {
    inp.validate()?;
    let terms = n0_terms(inp);
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(Error::Overflow(format!(
            "n0 term {} overflows",
            TERM_NAMES[i]
        )));
    }
    let (dominant, &value) = terms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    if value >= 9.0e15 {
        return Err(Error::Overflow(format!(
            "n0 term {} = {value:e} exceeds the integer range",
            TERM_NAMES[dominant]
        )));
    }
    Ok(N0Terms {
        terms,
        dominant,
        value,
        n0: (value.ceil() as u64).max(1),
    })
}

/// `(n0^(1-k) + 15.16 (1-k))^(1/(1-k))` without the ceiling.
pub fn n_prime0_real(n0: f64, k: f64) -> Result<f64> {
    if !(k > 0.5 && k < 1.0) {
        return domain(format!("k = {k} outside (1/2, 1)"));
    }
    if !(n0 >= 1.0) {
        return domain("n0 must be at least 1");
    }
    let r = 1.0 - k;
    Ok((n0.powf(r) + HORIZON_FACTOR * r).powf(1.0 / r))
}

/// Ceiling of [`n_prime0_real`].
pub fn n_prime0(n0: u64, k: f64) -> Result<u64> {
    let v = n_prime0_real(n0 as f64, k)?;
    if !(v < 9.0e15) {
        return Err(Error::Overflow(format!(
            "N'0 = {v:e} exceeds the integer range"
        )));
    }
    Ok(v.ceil() as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct CapitalN0 {
    pub threshold: f64,
    /// `min{n : sum_{i=n0+1}^{n} a(i) >= threshold} - n0`.
    pub steps: u64,
}

/// Scans `sum_{i=n0+1}^{n} a(i)` until it reaches `threshold`.
pub fn capital_n0_threshold(sched: &StepSchedule, n0: u64, threshold: f64) -> Result<CapitalN0> {
    if !threshold.is_finite() {
        return domain("threshold must be finite");
    }
    let mut acc = CompensatedSum::new();
    let mut n = n0;
    loop {
        n += 1;
        acc.add(sched.step(n)?);
        if acc.value() >= threshold {
            break;
        }
        if n - n0 >= THRESHOLD_LIMIT {
            return Err(Error::ThresholdOverflow {
                which: "N0".into(),
                limit: THRESHOLD_LIMIT,
            });
        }
    }
    Ok(CapitalN0 {
        threshold,
        steps: n - n0,
    })
}

/// `N0` with threshold `(T + 1)/(1 - exp(-(1 - alpha) T))`, `T = T*` unless
/// given.
pub fn capital_n0(
    sched: &StepSchedule,
    n0: u64,
    alpha: f64,
    horizon: Option<f64>,
) -> Result<CapitalN0> {
    let t = match horizon {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return domain(format!("horizon T = {t} must be positive")),
        None => t_star(alpha)?.0,
    };
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("alpha = {alpha} outside (0, 1)"));
    }
    capital_n0_threshold(sched, n0, phi(alpha, t))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub k: f64,
    pub n0: f64,
    #[serde(rename = "N_prime0")]
    pub n_prime0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub m: f64,
    pub eps: f64,
    pub gamma: f64,
    pub rows: Vec<SweepRow>,
    pub argmin_k: f64,
}

/// `n0` and `N'0` over `k_grid`, both kept real so the curves are smooth.
pub fn sweep_k(m: f64, eps: f64, gamma: f64, k_grid: &[f64]) -> Result<SweepTable> {
    if k_grid.is_empty() {
        return domain("empty k grid");
    }
    let rows: Vec<SweepRow> = k_grid
        .par_iter()
        .map(|&k| {
            let inp = ComplexityInputs::new(m, eps, gamma, k)?;
            let terms = n0_terms(&inp);
            let n0 = terms.iter().copied().fold(1.0_f64, f64::max);
            if !n0.is_finite() {
                return Err(Error::Overflow(format!("n0 overflows at k = {k}")));
            }
            let np = n_prime0_real(n0, k)?;
            if !np.is_finite() {
                return Err(Error::Overflow(format!("N'0 overflows at k = {k}")));
            }
            Ok(SweepRow {
                k,
                n0,
                n_prime0: np,
            })
        })
        .collect::<Result<_>>()?;
    let argmin_k = rows
        .iter()
        .min_by(|a, b| a.n_prime0.total_cmp(&b.n_prime0))
        .map(|r| r.k)
        .unwrap();
    Ok(SweepTable {
        m,
        eps,
        gamma,
        rows,
        argmin_k,
    })
}

/// `lo, lo + step, ..., <= hi` (inclusive up to rounding).
pub fn k_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi >= lo) {
        return domain("grid needs step > 0 and hi >= lo");
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_minimum() {
        let (t, v) = t_star(0.9).unwrap();
        assert!((v - 15.16).abs() <= 0.01, "{v}");
        assert!((t - 4.2).abs() <= 0.3, "{t}");
        // 1-D scan oracle
        let scan = (1..20_000)
            .map(|i| i as f64 * 1e-3)
            .map(|x| phi(0.9, x))
            .fold(f64::INFINITY, f64::min);
        assert!((v - scan).abs() < 1e-6);
        let (_, v2) = t_star_bracketed(0.9, 0.5, 30.0).unwrap();
        assert!((v - v2).abs() < 1e-4);
        let mut prev = 0.0;
        for i in 0..10 {
            let (_, v) = t_star(0.9 + 0.01 * i as f64).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn n0_terms_example() {
        let inp = ComplexityInputs::new(1.0, 0.1, 0.1, 0.75).unwrap();
        let r = n0_closed_form(&inp).unwrap();
        let expect = [
            21.544_346_900_318_837,
            400.0,
            40_000.0,
            464.158_883_361_277_9,
            212_075.924_419_135_92,
            900.0,
        ];
        for (got, want) in r.terms.iter().zip(expect) {
            assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
        }
        assert_eq!(r.dominant, 4);
        assert_eq!(r.n0, 212_076);

        let tiny = ComplexityInputs::new(1e-7, 0.01, 0.1, 0.75).unwrap();
        assert_eq!(n0_closed_form(&tiny).unwrap().n0, 1);

        let near_one = ComplexityInputs::new(1.0, 0.1, 1.0 - 1e-12, 0.75).unwrap();
        let t = n0_terms(&near_one);
        assert!(t[4] < 1e-18);
        assert!((t[2] - 40_000.0).abs() < 1e-9);
    }

    #[test]
    fn n0_monotone_in_inputs() {
        let base = |m, eps, gamma| {
            n0_closed_form(&ComplexityInputs::new(m, eps, gamma, 0.7).unwrap())
                .unwrap()
                .value
        };
        let ms = [0.01, 0.1, 1.0, 10.0];
        let es = [0.01, 0.05, 0.1, 0.5];
        let gs = [0.01, 0.05, 0.1, 0.5];
        for w in ms.windows(2) {
            assert!(base(w[1], 0.1, 0.1) >= base(w[0], 0.1, 0.1));
        }
        for w in es.windows(2) {
            assert!(base(1.0, w[1], 0.1) <= base(1.0, w[0], 0.1));
        }
        for w in gs.windows(2) {
            assert!(base(1.0, 0.1, w[1]) <= base(1.0, 0.1, w[0]));
        }
    }

    #[test]
    fn n_prime0_examples() {
        let v = n_prime0_real(1000.0, 0.75).unwrap();
        let want = (1000f64.powf(0.25) + 3.79).powi(4);
        assert!((v - want).abs() < 1e-9 * want);
        assert_eq!(n_prime0(1000, 0.75).unwrap(), want.ceil() as u64);
        assert_eq!(n_prime0(1, 0.75).unwrap(), 527);
        assert!(n_prime0(1, 1.0).is_err());
        for n0 in [1u64, 10, 1000, 100_000] {
            assert!(n_prime0(n0, 0.6).unwrap() >= n0);
        }
    }

    #[test]
    fn scan_for_capital_n0() {
        let ones = StepSchedule::explicit(vec![1.0; 100]).unwrap();
        assert_eq!(capital_n0_threshold(&ones, 1, 15.16).unwrap().steps, 16);
        assert!(capital_n0_threshold(&ones, 1, 0.0).unwrap().steps >= 1);
        assert!(matches!(
            capital_n0_threshold(&ones, 1, 500.0),
            Err(Error::ScheduleExhausted { .. })
        ));
        let (_, v) = t_star(0.9).unwrap();
        let direct = capital_n0(&ones, 1, 0.9, None).unwrap();
        assert_eq!(direct.steps, v.ceil() as u64);
    }

    #[test]
    fn sweep_singleton_and_direction() {
        let t = sweep_k(1.0, 0.1, 0.1, &[0.8]).unwrap();
        assert_eq!(t.argmin_k, 0.8);
        let grid = k_grid(0.55, 0.99, 0.01).unwrap();
        assert_eq!(grid.len(), 45);
        for eps in [0.01, 0.001] {
            let small = sweep_k(1e-7, eps, 0.1, &grid).unwrap();
            let large = sweep_k(100.0, eps, 0.1, &grid).unwrap();
            assert!(large.argmin_k > small.argmin_k);
            assert!(small
                .rows
                .iter()
                .chain(&large.rows)
                .all(|r| r.n_prime0.is_finite() && r.n_prime0 > 0.0));
        }
    }
}
