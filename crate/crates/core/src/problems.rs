//! Built-in benchmarks.
//!
//! All of them share a two-state chain with values `{+c, -c}` whose flip
//! probability `q(theta) = 0.2 + 0.3 / (1 + |theta|^2)` depends on the
//! iterate. The chain is doubly stochastic, so its stationary law is uniform
//! and the noise averages out of the mean field.
//!
//! | name | recursion | attractor |
//! |------|-----------|-----------|
//! | P1 | `f = (alpha - 1) theta + y` | `{0}` |
//! | P2 | `f = theta - theta^3 + y` | `{1}` with basin `(0, inf)` |
//! | P3 | slow `1 - theta + z1`, fast `theta - w + z2` | `w = theta`, `theta = 1` |
//! | P4 | `f = theta + y` | none (diverges) |

use std::sync::Arc;

use serde::Serialize;

use crate::bounds::{AzumaMode, BoundInputs, Tagged};
use crate::engine::{uniform_martingale, FieldFn, ProblemSpec};
use crate::error::{domain, Error, Result};
use crate::markov::{estimate_poisson_constants, DriftFn, KernelFamily, RowFn};
use crate::numeric::norm2;
use crate::odeflow::{constants_cl, horizon_t, Attractor, GeometrySpec, HorizonOptions, Region};
use crate::schedules::StepSchedule;
use crate::twotimescale::{SlowSteps, TwoTimescaleSpec};

/// Default noise level of the modulated chain.
pub const NOISE_LEVEL: f64 = 0.1;
/// Half-width of the uniform martingale noise.
pub const MARTINGALE_HALF_WIDTH: f64 = 0.05;

/// Flip probability of the modulated chain at `theta`.
pub fn flip_probability(theta: &[f64]) -> f64 {
    let r = norm2(theta);
    0.2 + 0.3 / (1.0 + r * r)
}

/// The shared two-state chain with values `{+c, -c}` (one state when `c = 0`).
pub fn modulated_chain(c: f64) -> Result<KernelFamily> {
    if !(c >= 0.0 && c.is_finite()) {
        return domain("noise level must be finite and nonnegative");
    }
    if c == 0.0 {
        return KernelFamily::constant(vec![vec![0.0]], nalgebra::DMatrix::identity(1, 1));
    }
    let row: RowFn = Arc::new(|theta: &[f64], s: usize, out: &mut [f64]| {
        let q = flip_probability(theta);
        out[s] = 1.0 - q;
        out[1 - s] = q;
    });
    KernelFamily::from_row_fn(vec![vec![c], vec![-c]], row)
}

#[derive(Clone, Debug)]
pub enum BenchmarkProblem {
    Single(ProblemSpec),
    Coupled(Box<TwoTimescaleSpec>),
}

/// Declared constants of a benchmark.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeclaredConstants {
    /// Growth of `f` on the audit region.
    pub k: f64,
    pub k_prime: f64,
    /// Lipschitz constant of `h` on `B`, when declared.
    pub l: Option<f64>,
    /// `sup |y|`
    pub c_bar: f64,
    pub c_r: Option<f64>,
    /// Half-width of the box or radius of the ball the audit covers.
    pub audit_radius: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub problem: BenchmarkProblem,
    pub geometry: Option<GeometrySpec>,
    pub schedule: StepSchedule,
    pub theta0: Vec<f64>,
    pub constants: DeclaredConstants,
    pub expected: &'static [&'static str],
}

/// Constants obtained while instantiating the bound inputs.
#[derive(Debug, Clone, Serialize)]
pub struct Instantiation {
    pub horizon: f64,
    pub max_entry_time: f64,
    pub c: f64,
    pub l: f64,
    pub l_estimated: bool,
    pub c_r: f64,
}

impl BenchmarkSpec {
    pub fn single(&self) -> Result<&ProblemSpec> {
        match &self.problem {
            BenchmarkProblem::Single(p) => Ok(p),
            BenchmarkProblem::Coupled(_) => {
                domain(format!("{} is a two-timescale benchmark", self.name))
            }
        }
    }

    pub fn coupled(&self) -> Result<&TwoTimescaleSpec> {
        match &self.problem {
            BenchmarkProblem::Coupled(p) => Ok(p),
            BenchmarkProblem::Single(_) => {
                domain(format!("{} is a single-timescale benchmark", self.name))
            }
        }
    }

    pub fn geometry(&self) -> Result<&GeometrySpec> {
        self.geometry
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("{} has no attractor geometry", self.name)))
    }

    /// Grid over the audit region.
    pub fn audit_grid(&self, density: usize) -> Result<Vec<Vec<f64>>> {
        let p = self.single()?;
        let r = self.constants.audit_radius;
        Region::cuboid(vec![-r; p.dim], vec![r; p.dim])?.grid(density)
    }

    /// Derives `T` from the flow, `C` and `L` along it, `C_R` from Poisson
    /// solutions on the `B` grid, and assembles the bound inputs with the
    /// uncalibrated default for `C_hat`.
    pub fn bound_inputs(
        &self,
        mode: AzumaMode,
        opts: &HorizonOptions,
    ) -> Result<(BoundInputs, Instantiation)> {
        let p = self.single()?;
        let geom = self.geometry()?;
        let h = |x: &[f64], out: &mut [f64]| {
            let v = p.mean_field(x).expect("mean field on the benchmark grid");
            out.copy_from_slice(&v);
        };
        let hz = horizon_t(geom, &h, opts)?;
        let cl = constants_cl(geom, &h, hz.t, self.constants.l, opts)?;
        let c_r = match self.constants.c_r {
            Some(v) => v,
            None => {
                let grid = geom.b.grid(opts.grid_density)?;
                estimate_poisson_constants(&p.kernel, &*p.f, &grid)?.c_r()
            }
        };
        let inputs = BoundInputs {
            l: if cl.l_estimated {
                Tagged::estimated(cl.l)
            } else {
                Tagged::user(cl.l)
            },
            c: Tagged::estimated(cl.c),
            c_bar: Tagged::user(self.constants.c_bar),
            k: Tagged::user(self.constants.k),
            k_prime: Tagged::user(self.constants.k_prime),
            c_r: if self.constants.c_r.is_some() {
                Tagged::user(c_r)
            } else {
                Tagged::estimated(c_r)
            },
            c_r_dprime: None,
            t: Tagged::estimated(hz.t),
            c_hat: None,
            mode,
            d: p.dim,
            delta_b: geom.delta_b,
            tilde_c: geom.b.sup_norm(),
        };
        Ok((
            inputs,
            Instantiation {
                horizon: hz.t,
                max_entry_time: hz.max_entry_time,
                c: cl.c,
                l: cl.l,
                l_estimated: cl.l_estimated,
                c_r,
            },
        ))
    }
}

fn field(h: impl Fn(f64) -> f64 + Send + Sync + 'static) -> FieldFn {
    Arc::new(move |t: &[f64], out: &mut [f64]| out[0] = h(t[0]))
}

/// P1 with contraction factor `alpha`, chain noise `c` and martingale
/// half-width `mart` (0 disables it).
pub fn contraction(alpha: f64, c: f64, mart: f64) -> Result<BenchmarkSpec> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain("contraction factor must lie in (0, 1)");
    }
    let rate = alpha - 1.0;
    let f: DriftFn =
        Arc::new(move |t: &[f64], y: &[f64], out: &mut [f64]| out[0] = rate * t[0] + y[0]);
    let k = (1.0 - alpha).max(c) + 1.0;
    let mut spec = ProblemSpec::new(1, f, modulated_chain(c)?, k)?
        .with_mean_field(field(move |x| rate * x))
        .with_lipschitz(1.0 - alpha);
    if mart > 0.0 {
        spec = spec.with_martingale(mart, uniform_martingale(mart));
    }
    let geometry = GeometrySpec::new(
        Attractor::Points(vec![vec![0.0]]),
        Region::ball(vec![0.0], 1.0)?,
        Region::everything(1),
        0.5,
        0.2,
        0.15,
    )?;
    Ok(BenchmarkSpec {
        name: "P1",
        description: "contraction to 0 with Markov-modulated noise",
        problem: BenchmarkProblem::Single(spec),
        geometry: Some(geometry),
        schedule: StepSchedule::power_law(0.6)?,
        theta0: vec![1.0],
        constants: DeclaredConstants {
            k,
            k_prime: mart,
            l: Some(1.0 - alpha),
            c_bar: c,
            c_r: None,
            audit_radius: 10.0,
        },
        expected: &[
            "mean field h(theta) = (alpha - 1) theta, unique fixed point 0",
            "iterates converge to 0 from any start",
        ],
    })
}

fn double_well() -> Result<BenchmarkSpec> {
    let f: DriftFn = Arc::new(|t: &[f64], y: &[f64], out: &mut [f64]| {
        let x = t[0];
        out[0] = x - x * x * x + y[0];
    });
    let spec = ProblemSpec::new(1, f, modulated_chain(NOISE_LEVEL)?, 2.1)?
        .with_martingale(
            MARTINGALE_HALF_WIDTH,
            uniform_martingale(MARTINGALE_HALF_WIDTH),
        )
        .with_mean_field(field(|x| x - x * x * x))
        .with_lipschitz(5.75);
    let geometry = GeometrySpec::new(
        Attractor::Points(vec![vec![1.0]]),
        Region::interval(0.5, 1.5)?,
        Region::interval(0.0, f64::INFINITY)?,
        0.45,
        0.05,
        0.2,
    )?;
    Ok(BenchmarkSpec {
        name: "P2",
        description: "double well theta - theta^3, lock-in at 1 with basin (0, inf)",
        problem: BenchmarkProblem::Single(spec),
        geometry: Some(geometry),
        schedule: StepSchedule::power_law(0.75)?,
        theta0: vec![1.0],
        constants: DeclaredConstants {
            k: 2.1,
            k_prime: MARTINGALE_HALF_WIDTH,
            l: Some(5.75),
            c_bar: NOISE_LEVEL,
            c_r: None,
            audit_radius: 2.0,
        },
        expected: &[
            "flow fixed points -1, 0, 1; 1 attracts (0, inf)",
            "lock-in probability from B = [0.5, 1.5] grows with n0",
        ],
    })
}

fn linear_two_timescale() -> Result<BenchmarkSpec> {
    let slow_chain = modulated_chain(NOISE_LEVEL)?;
    let fast_chain = modulated_chain(NOISE_LEVEL)?;
    let horizon = 1.1 * 10f64.ln();
    let spec = TwoTimescaleSpec {
        slow_dim: 1,
        fast_dim: 1,
        slow_field: Arc::new(|t: &[f64], z: &[f64], out: &mut [f64]| out[0] = 1.0 - t[0] + z[0]),
        slow_kernel: slow_chain,
        slow_mart: Some(uniform_martingale(MARTINGALE_HALF_WIDTH)),
        fast_field: Arc::new(|t: &[f64], w: &[f64], z: &[f64], out: &mut [f64]| {
            out[0] = t[0] - w[0] + z[0]
        }),
        fast_kernel: fast_chain,
        fast_mart: Some(uniform_martingale(MARTINGALE_HALF_WIDTH)),
        lambda: field(|x| x),
        slow_steps: SlowSteps::Schedule(StepSchedule::power_law(1.0)?),
        fast_steps: StepSchedule::power_law(0.6)?,
        fast_growth: 1.0 + NOISE_LEVEL,
        fast_mart_bound: MARTINGALE_HALF_WIDTH,
        t_slow: horizon,
        t_fast: horizon,
    };
    let geometry = GeometrySpec::new(
        Attractor::Points(vec![vec![1.0]]),
        Region::interval(0.0, 2.0)?,
        Region::everything(1),
        0.5,
        0.1,
        0.2,
    )?;
    Ok(BenchmarkSpec {
        name: "P3",
        description: "linear two-timescale tracking, w follows theta, theta -> 1",
        problem: BenchmarkProblem::Coupled(Box::new(spec)),
        geometry: Some(geometry),
        schedule: StepSchedule::power_law(1.0)?,
        theta0: vec![0.0, 0.5],
        constants: DeclaredConstants {
            k: 1.0 + NOISE_LEVEL,
            k_prime: MARTINGALE_HALF_WIDTH,
            l: Some(1.0),
            c_bar: NOISE_LEVEL,
            c_r: None,
            audit_radius: 2.0,
        },
        expected: &[
            "tracking error |w_n - theta_n| tends to 0",
            "slow iterate converges to 1",
        ],
    })
}

fn unstable() -> Result<BenchmarkSpec> {
    let f: DriftFn = Arc::new(|t: &[f64], y: &[f64], out: &mut [f64]| out[0] = t[0] + y[0]);
    let spec = ProblemSpec::new(1, f, modulated_chain(NOISE_LEVEL)?, 1.0 + NOISE_LEVEL)?
        .with_martingale(
            MARTINGALE_HALF_WIDTH,
            uniform_martingale(MARTINGALE_HALF_WIDTH),
        )
        .with_mean_field(field(|x| x))
        .with_lipschitz(1.0);
    Ok(BenchmarkSpec {
        name: "P4",
        description: "unstable field theta (negative control)",
        problem: BenchmarkProblem::Single(spec),
        geometry: None,
        schedule: StepSchedule::power_law(0.75)?,
        theta0: vec![1.0],
        constants: DeclaredConstants {
            k: 1.0 + NOISE_LEVEL,
            k_prime: MARTINGALE_HALF_WIDTH,
            l: Some(1.0),
            c_bar: NOISE_LEVEL,
            c_r: None,
            audit_radius: 10.0,
        },
        expected: &[
            "iterates diverge from |theta0| >= 1",
            "tightness diagnostics flag a failure",
        ],
    })
}

/// Registered names with one-line descriptions.
pub fn list() -> Vec<(&'static str, &'static str)> {
    vec![
        ("P1", "contraction to 0 with Markov-modulated noise"),
        (
            "P2",
            "double well theta - theta^3, lock-in at 1 with basin (0, inf)",
        ),
        (
            "P3",
            "linear two-timescale tracking, w follows theta, theta -> 1",
        ),
        ("P4", "unstable field theta (negative control)"),
    ]
}

/// Looks up a benchmark by name (case-insensitive).
pub fn get(name: &str) -> Result<BenchmarkSpec> {
    match name.to_ascii_uppercase().as_str() {
        "P1" => contraction(0.9, NOISE_LEVEL, MARTINGALE_HALF_WIDTH),
        "P2" => double_well(),
        "P3" => linear_two_timescale(),
        "P4" => unstable(),
        _ => Err(Error::UnknownBenchmark(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, RunSetup, SimOptions};
    use crate::markov::solve_poisson;
    use crate::twotimescale::{simulate_coupled, tracking_error};

    #[test]
    fn registry() {
        for (name, desc) in list() {
            let b = get(name).unwrap();
            assert_eq!(b.name, name);
            assert_eq!(b.description, desc);
        }
        assert!(get("p2").is_ok());
        assert!(matches!(get("P9"), Err(Error::UnknownBenchmark(_))));
    }

    #[test]
    fn p1_mean_field_and_poisson() {
        let b = get("P1").unwrap();
        let p = b.single().unwrap();
        let h = p.mean_field(&[2.0]).unwrap();
        assert!((h[0] + 0.2).abs() < 1e-12);
        // the stationary average agrees with the analytic field
        let avg = crate::markov::mean_field(&p.kernel, &*p.f, &[2.0], 1).unwrap();
        assert!((avg[0] + 0.2).abs() < 1e-12);
        let sol = solve_poisson(&p.kernel, &*p.f, &[0.3], 1).unwrap();
        assert!(sol.residual <= 1e-10);
        let q = flip_probability(&[0.3]);
        assert!((sol.v[0][0] - NOISE_LEVEL / (2.0 * q)).abs() < 1e-12);
        let grid = b.audit_grid(41).unwrap();
        p.audit(&grid, 20, 1).unwrap();
        assert_eq!(b.constants.k, 1.1);
    }

    #[test]
    fn p2_flow_and_audit() {
        let b = get("P2").unwrap();
        let p = b.single().unwrap();
        for x in [-1.0, 0.0, 1.0] {
            assert!(p.mean_field(&[x]).unwrap()[0].abs() < 1e-12);
        }
        // sign analysis: h > 0 on (0, 1), h < 0 on (1, inf)
        assert!(p.mean_field(&[0.3]).unwrap()[0] > 0.0);
        assert!(p.mean_field(&[1.7]).unwrap()[0] < 0.0);
        p.audit(&b.audit_grid(81).unwrap(), 20, 1).unwrap();
        let h = |x: &[f64], out: &mut [f64]| out[0] = x[0] - x[0].powi(3);
        let hz = horizon_t(b.geometry().unwrap(), &h, &HorizonOptions::default()).unwrap();
        assert!(hz.t.is_finite());
        assert!((hz.max_entry_time - 1.661_964_300_435_671_7).abs() < 1e-6);
    }

    #[test]
    fn p2_bound_inputs_instantiate() {
        let b = get("P2").unwrap();
        let (inp, inst) = b
            .bound_inputs(AzumaMode::Scaled, &HorizonOptions::default())
            .unwrap();
        assert!(inst.c > 0.0 && inst.c_r > 0.0);
        assert_eq!(inp.d, 1);
        assert_eq!(inp.tilde_c, 1.5);
        assert!(inp.c_hat.is_none());
    }

    #[test]
    fn p3_audits() {
        let b = get("P3").unwrap();
        let spec = b.coupled().unwrap();
        let samples: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 * 0.2]).collect();
        let audit = spec.audit(2, 100_000, &samples).unwrap();
        assert!(audit.max_ratio < 1.0);
        assert!((audit.lambda_lipschitz_estimate - 1.0).abs() < 1e-12);
        assert!(spec.t_coupled() >= spec.t_slow + 1.0);
        let tr = simulate_coupled(spec, &[0.0], &[0.5], (0, 0), 1, 20_000, 2).unwrap();
        let err = tracking_error(&tr, &spec.lambda, 0.1).unwrap();
        assert!(err.window_mean < 0.05);
    }

    #[test]
    fn p4_diverges() {
        let b = get("P4").unwrap();
        let p = b.single().unwrap();
        assert!(b.geometry().is_err());
        for seed in 0..5 {
            let rec = simulate(
                p,
                &b.schedule,
                &RunSetup::new(vec![1.0], 1, 100_000),
                seed,
                &SimOptions {
                    stride: 100,
                    record_increments: false,
                },
            )
            .unwrap();
            assert!(rec.diverged);
        }
    }

    #[test]
    fn noise_free_contraction_has_one_state() {
        let b = contraction(0.9, 0.0, 0.0).unwrap();
        let p = b.single().unwrap();
        assert_eq!(p.kernel.state_count(), 1);
        assert!(p.mart.is_none());
    }
}
