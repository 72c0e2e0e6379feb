//! `lockin` command-line tool.
//!
//! Exit status: 0 on success, 1 for invalid input (flags, config, parameters),
//! 2 for numeric or infeasibility failures.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::output::{sha256_hex, Format, Manifest, Outputs};

#[derive(Parser, Debug)]
#[command(
    name = "lockin",
    version,
    about = "Stochastic approximation with Markov iterate-dependent noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Table format.
    #[arg(long, global = true, value_parser = ["csv", "json"])]
    format: Option<String>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One trajectory with the Gronwall envelope check.
    Simulate {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long = "n-start")]
        n_start: Option<String>,
        /// Comma-separated initial iterate.
        #[arg(long)]
        theta0: Option<String>,
        #[arg(long)]
        stride: Option<String>,
        /// Segments for the deviation report (0 = none).
        #[arg(long)]
        segments: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo lock-in estimate next to the theoretical bound.
    Lockin {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        /// Comma-separated list of n0 values.
        #[arg(long)]
        n0: Option<String>,
        #[arg(long)]
        reps: Option<String>,
        /// Index of the last iterate (default 10 n0).
        #[arg(long)]
        horizon: Option<String>,
        /// `restart` or `rejection`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        level: Option<String>,
        #[arg(long)]
        eta: Option<String>,
        /// `scaled` or `classical`.
        #[arg(long)]
        azuma: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Bound constants, n0 thresholds and the lock-in bound.
    Bounds {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        azuma: Option<String>,
        #[arg(long)]
        nu: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Poisson residuals and the noise decomposition on a trajectory.
    PoissonCheck {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Tightness diagnostics and the tightness series.
    Tight {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        reps: Option<String>,
        /// Comma-separated step indices.
        #[arg(long = "n-grid")]
        n_grid: Option<String>,
        #[arg(long)]
        radius: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Two-timescale run with tracking error and the nested bound.
    Track {
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        n0: Option<String>,
        #[arg(long)]
        segments: Option<String>,
        #[arg(long)]
        window: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample complexity: n0, N'0, N0 and the step-exponent sweep.
    Complexity {
        /// Comma-separated list.
        #[arg(long = "M")]
        m: Option<String>,
        /// Comma-separated list.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        alpha: Option<String>,
        /// `lo:hi:step` grid of step exponents.
        #[arg(long)]
        sweep: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Benchmark registry.
    Problems {
        #[command(subcommand)]
        action: ProblemsAction,
    },
}

#[derive(Subcommand, Debug)]
enum ProblemsAction {
    /// Names and one-line descriptions.
    List {
        #[command(flatten)]
        common: Common,
    },
}

/// What a command reports for the manifest.
#[derive(Debug, Default)]
pub struct RunInfo {
    pub benchmark: Option<String>,
    pub schedule: Option<String>,
}

/// Everything a command needs.
pub struct Context {
    pub cfg: Config,
    pub seed: u64,
    pub out: Outputs,
}

fn put(cfg: &mut Config, section: &str, key: &str, flag: &str, value: &Option<String>) {
    if let Some(v) = value {
        cfg.set_flag(section, key, flag, v);
    }
}

type Flags<'a> = Vec<(&'static str, &'static str, &'static str, &'a Option<String>)>;

fn build_config(common: &Common, flags: Flags<'_>) -> CliResult<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for (section, key, flag, value) in [
        ("run", "seed", "--seed", &common.seed),
        ("run", "out", "--out", &common.out),
        ("run", "format", "--format", &common.format),
    ] {
        put(&mut cfg, section, key, flag, value);
    }
    for (section, key, flag, value) in flags {
        put(&mut cfg, section, key, flag, value);
    }
    for s in &common.set {
        cfg.set_assignment(s)?;
    }
    Ok(cfg)
}

fn configure_threads(common: &Common, cfg: &Config) -> CliResult<()> {
    let threads: usize = match &common.threads {
        Some(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("--threads: cannot parse {v:?}")))?,
        None => cfg.get_or("run", "threads", 0)?,
    };
    if threads > 0 {
        // a second initialisation only happens in tests and is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

type Runner = fn(&mut Context) -> CliResult<RunInfo>;

fn execute(cli: Cli) -> CliResult<()> {
    use commands::*;
    let (name, common, flags, run): (&str, Common, Flags<'_>, Runner) = match &cli.command {
        Command::Simulate {
            benchmark,
            schedule,
            steps,
            n_start,
            theta0,
            stride,
            segments,
            common,
        } => (
            "simulate",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("schedule", "step", "--schedule", schedule),
                ("simulate", "steps", "--steps", steps),
                ("simulate", "n_start", "--n-start", n_start),
                ("simulate", "theta0", "--theta0", theta0),
                ("simulate", "stride", "--stride", stride),
                ("simulate", "segments", "--segments", segments),
            ],
            simulate::run,
        ),
        Command::Lockin {
            benchmark,
            schedule,
            n0,
            reps,
            horizon,
            mode,
            level,
            eta,
            azuma,
            common,
        } => (
            "lockin",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("schedule", "step", "--schedule", schedule),
                ("lockin", "n0", "--n0", n0),
                ("lockin", "reps", "--reps", reps),
                ("lockin", "horizon", "--horizon", horizon),
                ("lockin", "mode", "--mode", mode),
                ("lockin", "level", "--level", level),
                ("lockin", "eta", "--eta", eta),
                ("constants", "azuma", "--azuma", azuma),
            ],
            estimate::run,
        ),
        Command::Bounds {
            benchmark,
            schedule,
            azuma,
            nu,
            common,
        } => (
            "bounds",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("schedule", "step", "--schedule", schedule),
                ("constants", "azuma", "--azuma", azuma),
                ("constants", "nu", "--nu", nu),
            ],
            bounds::run,
        ),
        Command::PoissonCheck {
            benchmark,
            schedule,
            steps,
            common,
        } => (
            "poisson-check",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("schedule", "step", "--schedule", schedule),
                ("poisson", "steps", "--steps", steps),
            ],
            poisson::run,
        ),
        Command::Tight {
            benchmark,
            schedule,
            reps,
            n_grid,
            radius,
            common,
        } => (
            "tight",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("schedule", "step", "--schedule", schedule),
                ("tight", "reps", "--reps", reps),
                ("tight", "n_grid", "--n-grid", n_grid),
                ("tight", "radius", "--radius", radius),
            ],
            tight::run,
        ),
        Command::Track {
            benchmark,
            steps,
            n0,
            segments,
            window,
            common,
        } => (
            "track",
            common.clone(),
            vec![
                ("run", "benchmark", "--benchmark", benchmark),
                ("track", "steps", "--steps", steps),
                ("track", "n0", "--n0", n0),
                ("track", "segments", "--segments", segments),
                ("track", "window", "--window", window),
            ],
            track::run,
        ),
        Command::Complexity {
            m,
            eps,
            gamma,
            k,
            alpha,
            sweep,
            common,
        } => (
            "complexity",
            common.clone(),
            vec![
                ("complexity", "M", "--M", m),
                ("complexity", "eps", "--eps", eps),
                ("complexity", "gamma", "--gamma", gamma),
                ("complexity", "k", "--k", k),
                ("complexity", "alpha", "--alpha", alpha),
                ("complexity", "sweep", "--sweep", sweep),
            ],
            complexity::run,
        ),
        Command::Problems {
            action: ProblemsAction::List { common },
        } => ("problems list", common.clone(), vec![], problems::run),
    };

    let cfg = build_config(&common, flags)?;
    configure_threads(&common, &cfg)?;
    let seed: u64 = cfg.get_or("run", "seed", 1)?;
    let format_text: String = cfg.get_or("run", "format", "csv".to_string())?;
    let format = Format::parse(&format_text)
        .ok_or_else(|| cfg.reject("run", "format", "format must be csv or json"))?;
    let out_dir: String = cfg.get_or("run", "out", "out".to_string())?;
    let out = Outputs::new(std::path::Path::new(&out_dir), format)?;
    let mut ctx = Context { cfg, seed, out };
    let result = run(&mut ctx);
    let error = match &result {
        Ok(_) => None,
        Err(e) => Some(e.to_string()),
    };
    let (benchmark, schedule) = match &result {
        Ok(info) => (info.benchmark.clone(), info.schedule.clone()),
        Err(_) => (ctx.cfg.raw("run", "benchmark").map(str::to_string), None),
    };

    // where the files go and how many threads made them do not change them
    let echo = ctx
        .cfg
        .without(&[("run", "out"), ("run", "threads")])
        .echo();
    let manifest = Manifest {
        tool: "lockin",
        version: env!("CARGO_PKG_VERSION"),
        command: name.to_string(),
        benchmark,
        schedule,
        seed,
        format: match format {
            Format::Csv => "csv",
            Format::Json => "json",
        },
        config_sha256: sha256_hex(echo.as_bytes()),
        config: echo,
        outputs: ctx.out.files().to_vec(),
        error,
    };
    ctx.out.write_json("manifest.json", &manifest)?;
    result?;
    println!("outputs written to {out_dir}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
