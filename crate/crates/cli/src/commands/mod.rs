//! Subcommands and the setup they share.

pub mod bounds;
pub mod complexity;
pub mod estimate;
pub mod poisson;
pub mod problems;
pub mod simulate;
pub mod tight;
pub mod track;

use lockin::bounds::{AzumaMode, BoundConstants, BoundInputs, Tagged};
use lockin::engine::InitialState;
use lockin::odeflow::{GeometrySpec, HorizonOptions};
use lockin::problems::{self as registry, BenchmarkSpec, Instantiation};
use lockin::schedules::StepSchedule;
use serde::Serialize;

use crate::config::Config;
use crate::error::{CliError, CliResult};

/// Resolves `run.benchmark` and applies `[geometry]` overrides.
pub fn benchmark(cfg: &Config, default: &str) -> CliResult<BenchmarkSpec> {
    let name = cfg.raw("run", "benchmark").unwrap_or(default);
    let mut bench =
        registry::get(name).map_err(|e| cfg.reject("run", "benchmark", e.to_string()))?;
    let eps: Option<f64> = cfg.get("geometry", "eps")?;
    let eps1: Option<f64> = cfg.get("geometry", "eps1")?;
    let delta_b: Option<f64> = cfg.get("geometry", "delta_b")?;
    if eps.is_some() || eps1.is_some() || delta_b.is_some() {
        let g = bench.geometry()?.clone();
        let geom = GeometrySpec::new(
            g.attractor,
            g.b,
            g.g,
            eps.unwrap_or(g.eps),
            eps1.unwrap_or(g.eps1),
            delta_b.unwrap_or(g.delta_b),
        )
        .map_err(|e| cfg.reject("geometry", "eps", e.to_string()))?;
        bench.geometry = Some(geom);
    }
    Ok(bench)
}

/// `schedule.step` or the benchmark's own schedule.
pub fn schedule(cfg: &Config, bench: &BenchmarkSpec) -> CliResult<StepSchedule> {
    match cfg.raw("schedule", "step") {
        Some(lit) => StepSchedule::parse(lit, cfg.base_dir())
            .map_err(|e| cfg.reject("schedule", "step", e.to_string())),
        None => Ok(bench.schedule.clone()),
    }
}

/// `run.y0`: `fixed:<state>` or `stationary`.
pub fn initial_state(cfg: &Config) -> CliResult<InitialState> {
    match cfg.raw("run", "y0") {
        None => Ok(InitialState::Fixed(0)),
        Some("stationary") => Ok(InitialState::Stationary),
        Some(v) => v
            .strip_prefix("fixed:")
            .and_then(|s| s.trim().parse().ok())
            .map(InitialState::Fixed)
            .ok_or_else(|| cfg.reject("run", "y0", "y0 must be fixed:<state> or stationary")),
    }
}

pub fn azuma_mode(cfg: &Config) -> CliResult<AzumaMode> {
    match cfg.raw("constants", "azuma") {
        None | Some("scaled") => Ok(AzumaMode::Scaled),
        Some("classical") => Ok(AzumaMode::Classical),
        Some(_) => Err(cfg.reject("constants", "azuma", "azuma must be scaled or classical")),
    }
}

/// `constants.nu`, default 0.
pub fn nu(cfg: &Config) -> CliResult<f64> {
    cfg.get_or("constants", "nu", 0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct Instantiated {
    pub inputs: BoundInputs,
    pub instantiation: Instantiation,
    pub constants: BoundConstants,
}

/// Bound inputs instantiated from the benchmark, then `[constants]`
/// overrides marked as user-set.
pub fn bound_constants(cfg: &Config, bench: &BenchmarkSpec) -> CliResult<Instantiated> {
    let (mut inputs, instantiation) =
        bench.bound_inputs(azuma_mode(cfg)?, &HorizonOptions::default())?;
    let overrides: [(&str, &mut Tagged); 6] = [
        ("L", &mut inputs.l),
        ("C", &mut inputs.c),
        ("C_R", &mut inputs.c_r),
        ("T", &mut inputs.t),
        ("K", &mut inputs.k),
        ("K_prime", &mut inputs.k_prime),
    ];
    for (key, slot) in overrides {
        if let Some(v) = cfg.get::<f64>("constants", key)? {
            *slot = Tagged::user(v);
        }
    }
    if let Some(v) = cfg.get::<f64>("constants", "C_hat")? {
        inputs.c_hat = Some(Tagged::user(v));
    }
    let constants = BoundConstants::derive(&inputs).map_err(|e| match e {
        lockin::Error::Domain(msg) => CliError::Usage(msg),
        other => other.into(),
    })?;
    Ok(Instantiated {
        inputs,
        instantiation,
        constants,
    })
}
