use std::sync::OnceLock;

use lockin::bounds::{azuma_maximal, lockin_lower_bound, AzumaMode, BoundConstants};
use lockin::complexity::{
    n0_closed_form, n0_terms, n_prime0_real, t_star, t_star_bracketed, ComplexityInputs,
};
use lockin::engine::{simulate, RunSetup, SimOptions};
use lockin::markov::{solve_poisson, stationary, KernelFamily};
use lockin::montecarlo::wilson_interval;
use lockin::odeflow::{partition, HorizonOptions};
use lockin::problems;
use lockin::schedules::{s_tail_bound, StepSchedule};
use lockin::twotimescale::{nested_bound, NestedTails};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = StepSchedule> {
    prop_oneof![
        (0.51f64..=1.0).prop_map(|k| StepSchedule::power_law(k).unwrap()),
        (0.05f64..=1.0).prop_map(|p| StepSchedule::log_power(p).unwrap()),
    ]
}

/// Row-stochastic matrix with a cycle through every state.
fn chain() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=12).prop_flat_map(|s| {
        proptest::collection::vec(0.0f64..1.0, s * s).prop_map(move |w| {
            let mut m = DMatrix::from_row_slice(s, s, &w);
            for i in 0..s {
                for j in 0..s {
                    if m[(i, j)] < 0.5 {
                        m[(i, j)] = 0.0;
                    }
                }
                m[(i, (i + 1) % s)] += 0.1;
                let total: f64 = m.row(i).sum();
                for j in 0..s {
                    m[(i, j)] /= total;
                }
            }
            m
        })
    })
}

fn p1_constants() -> &'static BoundConstants {
    static CONSTS: OnceLock<BoundConstants> = OnceLock::new();
    CONSTS.get_or_init(|| {
        let bench = problems::get("P1").unwrap();
        let (inputs, _) = bench
            .bound_inputs(AzumaMode::Scaled, &HorizonOptions::default())
            .unwrap();
        BoundConstants::derive(&inputs).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steps_positive_and_non_increasing(sched in schedule(), start in 2u64..100_000, len in 1u64..200) {
        let from = start.max(sched.offset());
        let mut prev = f64::INFINITY;
        for n in from..from + len {
            let a = sched.step(n).unwrap();
            prop_assert!(a > 0.0);
            prop_assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn tails_strictly_decrease(sched in schedule(), n in 2u64..1_000_000) {
        let n = n.max(sched.offset());
        let here = sched.s_tail(n, 1e-14).unwrap().value;
        let next = sched.s_tail(n + 1, 1e-14).unwrap().value;
        prop_assert!(next < here, "s({}) = {next} not below s({n}) = {here}", n + 1);
    }

    #[test]
    fn tail_bound_dominates(k in 0.55f64..=1.0, n in 2u64..100_000) {
        let sched = StepSchedule::power_law(k).unwrap();
        let s = sched.s_tail(n, 1e-13).unwrap();
        prop_assert!(s.value + s.error <= s_tail_bound(k, n).unwrap());
    }

    #[test]
    fn partition_segments_have_length_t(k in 0.55f64..=1.0, n0 in 1u64..2_000, t in 0.1f64..0.6) {
        let sched = StepSchedule::power_law(k).unwrap();
        let part = partition(&sched, n0, t, 5).unwrap();
        for w in part.boundaries.windows(2) {
            let gap = sched.t_between(w[0], w[1]).unwrap();
            let last = sched.step(w[1] - 1).unwrap();
            prop_assert!(gap >= t - 1e-9 && gap <= t + last + 1e-9, "gap {gap} for T = {t}");
        }
    }

    #[test]
    fn stationary_law_and_poisson_solution(m in chain(), theta in -1.0f64..1.0) {
        let s = m.nrows();
        let values: Vec<Vec<f64>> = (0..s).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let kernel = KernelFamily::constant(values, m.clone()).unwrap();
        let pi = stationary(&kernel, &[theta]).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for j in 0..s {
            let flow: f64 = (0..s).map(|i| pi[i] * m[(i, j)]).sum();
            prop_assert!((flow - pi[j]).abs() <= 1e-12);
        }
        let f = |t: &[f64], y: &[f64], out: &mut [f64]| {
            out[0] = y[0] - t[0];
            out[1] = y[1] * t[0];
        };
        let sol = solve_poisson(&kernel, &f, &[theta], 2).unwrap();
        prop_assert!(sol.residual <= 1e-10);
        prop_assert!(sol.normalization <= 1e-10);
        // f - h has zero mean under the stationary law
        for c in 0..2 {
            let mut fy = [0.0; 2];
            let mean: f64 = (0..s)
                .map(|i| {
                    f(&[theta], kernel.value(i), &mut fy);
                    sol.pi[i] * (fy[c] - sol.h[c])
                })
                .sum();
            prop_assert!(mean.abs() <= 1e-12);
        }
        // the one-step conditional mean of v(Y') matches (Pi v)(Y)
        for i in 0..s {
            for c in 0..2 {
                let ev: f64 = (0..s).map(|j| m[(i, j)] * sol.v[j][c]).sum();
                prop_assert!((ev - sol.pi_v[i][c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn replay_and_thinning(seed in any::<u64>(), stride in 1usize..20) {
        let bench = problems::get("P2").unwrap();
        let spec = bench.single().unwrap();
        let setup = RunSetup::new(bench.theta0.clone(), 1, 300);
        let full_opts = SimOptions { stride: 1, record_increments: false };
        let a = simulate(spec, &bench.schedule, &setup, seed, &full_opts).unwrap();
        let b = simulate(spec, &bench.schedule, &setup, seed, &full_opts).unwrap();
        prop_assert_eq!(&a, &b);
        let thin = simulate(spec, &bench.schedule, &setup, seed, &SimOptions { stride, record_increments: false }).unwrap();
        for (i, &n) in thin.indices.iter().enumerate() {
            let j = a.indices.iter().position(|&m| m == n).unwrap();
            prop_assert_eq!(thin.theta(i), a.theta(j));
            prop_assert_eq!(thin.states[i], a.states[j]);
        }
        prop_assert_eq!(thin.indices.last(), a.indices.last());
    }

    #[test]
    fn azuma_clamp(lambda in 0.0f64..10.0, cs in proptest::collection::vec(0.0f64..2.0, 1..20), classical in any::<bool>()) {
        let mode = if classical { AzumaMode::Classical } else { AzumaMode::Scaled };
        let p = azuma_maximal(lambda, &cs, mode).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let sum_sq: f64 = cs.iter().map(|c| c * c).sum();
        if sum_sq > 0.0 {
            let saturated = lambda * lambda <= mode.denominator_scale() * sum_sq * std::f64::consts::LN_2;
            prop_assert_eq!(p == 1.0, saturated);
        }
    }

    #[test]
    fn lockin_bound_monotone(s1 in 1e-8f64..1e-2, s2 in 1e-8f64..1e-2, db1 in 0.01f64..0.15, db2 in 0.01f64..0.15) {
        let c = p1_constants();
        let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(lockin_lower_bound(c, shi, 0.0).unwrap() <= lockin_lower_bound(c, slo, 0.0).unwrap());
        let (dlo, dhi) = if db1 <= db2 { (db1, db2) } else { (db2, db1) };
        let at = |db: f64| lockin_lower_bound(&c.with_delta_b(db), slo, 0.0).unwrap();
        prop_assert!(at(dlo) <= at(dhi));
    }

    #[test]
    fn wilson_brackets_the_estimate(trials in 1u64..5_000, frac in 0.0f64..=1.0, z in 0.0f64..4.0) {
        let successes = ((trials as f64) * frac).round() as u64;
        let (lo, hi) = wilson_interval(successes, trials, z).unwrap();
        let p = successes as f64 / trials as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn nested_bound_monotone(
        ps in proptest::collection::vec(0.0f64..0.05, 4),
        pc in proptest::collection::vec(0.0f64..0.05, 3),
        which in 0usize..7,
        bump in 0.0f64..0.05,
    ) {
        let l_map = [0, 1, 3];
        let base = nested_bound(&ps, &pc, &l_map, NestedTails::default()).unwrap().bound;
        let (mut ps2, mut pc2) = (ps.clone(), pc.clone());
        if which < 4 { ps2[which] += bump } else { pc2[which - 4] += bump }
        let raised = nested_bound(&ps2, &pc2, &l_map, NestedTails::default()).unwrap().bound;
        prop_assert!(raised <= base);
    }

    #[test]
    fn n0_monotone_in_inputs(
        m in 1e-6f64..1e3, eps in 1e-3f64..1.0, gamma in 0.01f64..0.9, k in 0.6f64..0.95, f in 1.0f64..5.0,
    ) {
        let base = ComplexityInputs::new(m, eps, gamma, k).unwrap();
        let value = |inp: ComplexityInputs| n0_terms(&inp).iter().copied().fold(1.0, f64::max);
        let v = value(base);
        let more_m = value(ComplexityInputs { m: m * f, ..base });
        let more_eps = value(ComplexityInputs { eps: eps * f, ..base });
        let more_gamma = value(ComplexityInputs { gamma: (gamma * f).min(0.99), ..base });
        prop_assert!(more_m >= v);
        prop_assert!(more_eps <= v);
        prop_assert!(more_gamma <= v);
        if let Ok(n0) = n0_closed_form(&base) {
            prop_assert!(n_prime0_real(n0.n0 as f64, k).unwrap() >= n0.n0 as f64);
        }
    }

    #[test]
    fn horizon_minimum_ignores_bracket(alpha in 0.5f64..0.99, lo in 1e-4f64..0.5, widen in 1.5f64..4.0) {
        let (_, reference) = t_star(alpha).unwrap();
        let hi = widen * 60.0 / (1.0 - alpha);
        let (_, value) = t_star_bracketed(alpha, lo, hi).unwrap();
        prop_assert!((value - reference).abs() <= 1e-4 * reference);
    }
}

#[test]
fn time_diverges_for_slow_schedules() {
    // t(n) against a lower bound from the antiderivative of the step function
    for k in [0.6, 0.8, 1.0] {
        let sched = StepSchedule::power_law(k).unwrap();
        let n = 10_000_000u64;
        let t = sched.t_of(n).unwrap();
        let lower = if k == 1.0 {
            (n as f64).ln()
        } else {
            ((n as f64).powf(1.0 - k) - 1.0) / (1.0 - k)
        };
        assert!(t >= lower, "k = {k}: t = {t}, integral {lower}");
        assert!(t > 15.0);
    }
    let sched = StepSchedule::log_power(1.0).unwrap();
    let n = 10_000_000u64;
    let t = sched.t_of(n).unwrap();
    let lower = (n as f64).ln().ln() - 2f64.ln().ln();
    assert!(t >= lower, "t = {t}, integral {lower}");
}
