//! Sample-complexity thresholds and the step-exponent sweep.

use lockin::complexity::{
    capital_n0, k_grid, n0_closed_form, n_prime0, sweep_k, t_star, CapitalN0, ComplexityInputs,
    N0Terms, SweepTable,
};
use lockin::report::{self, LinePlot, Series};
use lockin::schedules::StepSchedule;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::{Context, RunInfo};

#[derive(Serialize)]
struct PointResult {
    m: f64,
    eps: f64,
    n0: Option<N0Terms>,
    n_prime0: Option<u64>,
    /// `None` when the scan would exceed `scan_limit` steps.
    capital_n0: Option<CapitalN0>,
    /// Set when the integer thresholds overflow.
    error: Option<String>,
}

#[derive(Serialize)]
struct ComplexityOutput {
    gamma: f64,
    k: f64,
    alpha: f64,
    t_star: f64,
    horizon_factor: f64,
    points: Vec<PointResult>,
    sweeps: Vec<SweepSummary>,
}

#[derive(Serialize)]
struct SweepSummary {
    m: f64,
    eps: f64,
    file: String,
    argmin_k: f64,
    min_n_prime0: f64,
}

fn sweep_stem(m: f64, eps: f64, single: bool) -> String {
    if single {
        "sweep".to_string()
    } else {
        format!("sweep_M{m}_eps{eps}")
    }
}

pub fn run(ctx: &mut Context) -> CliResult<RunInfo> {
    let cfg = &ctx.cfg;
    let ms: Vec<f64> = cfg
        .get_list("complexity", "M")?
        .unwrap_or_else(|| vec![100.0]);
    let epss: Vec<f64> = cfg
        .get_list("complexity", "eps")?
        .unwrap_or_else(|| vec![0.01]);
    let gamma: f64 = cfg.get_or("complexity", "gamma", 0.1)?;
    let k: f64 = cfg.get_or("complexity", "k", 0.75)?;
    let alpha: f64 = cfg.get_or("complexity", "alpha", 0.9)?;
    let scan_limit: u64 = cfg.get_or("complexity", "scan_limit", 100_000_000)?;
    let sweep = match cfg.raw("complexity", "sweep") {
        None => None,
        Some(text) => {
            let parts: Vec<f64> = text
                .split(':')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| cfg.reject("complexity", "sweep", "sweep must be lo:hi:step"))?;
            if parts.len() != 3 {
                return Err(cfg.reject("complexity", "sweep", "sweep must be lo:hi:step"));
            }
            Some(
                k_grid(parts[0], parts[1], parts[2])
                    .map_err(|e| cfg.reject("complexity", "sweep", e.to_string()))?,
            )
        }
    };

    let (t, factor) = t_star(alpha)?;
    println!("T* = {t:.6}, horizon factor = {factor:.6}");
    let sched =
        StepSchedule::power_law(k).map_err(|e| cfg.reject("complexity", "k", e.to_string()))?;
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &m in &ms {
        for &eps in &epss {
            let mut inp = ComplexityInputs::new(m, eps, gamma, k)
                .map_err(|e| cfg.reject("complexity", "M", e.to_string()))?;
            inp.alpha = alpha;
            inp.validate()
                .map_err(|e| cfg.reject("complexity", "alpha", e.to_string()))?;
            let thresholds = n0_closed_form(&inp).and_then(|n0| {
                let np = n_prime0(n0.n0, k)?;
                Ok((n0, np))
            });
            let (n0, np) = match thresholds {
                Ok(v) => v,
                Err(e) if e.is_numeric() => {
                    println!("M = {m}, eps = {eps}: {e}");
                    failures.push(format!("M = {m}, eps = {eps}: {e}"));
                    points.push(PointResult {
                        m,
                        eps,
                        n0: None,
                        n_prime0: None,
                        capital_n0: None,
                        error: Some(e.to_string()),
                    });
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let big_n0 = if np.saturating_sub(n0.n0) <= scan_limit {
                Some(capital_n0(&sched, n0.n0, alpha, Some(t))?)
            } else {
                None
            };
            println!(
                "M = {m}, eps = {eps}: n0 = {}, N'0 = {np}, N0 = {}",
                n0.n0,
                big_n0
                    .as_ref()
                    .map(|c| c.steps.to_string())
                    .unwrap_or_else(|| "not scanned".into())
            );
            points.push(PointResult {
                m,
                eps,
                n0: Some(n0),
                n_prime0: Some(np),
                capital_n0: big_n0,
                error: None,
            });
        }
    }

    let mut sweeps = Vec::new();
    if let Some(grid) = sweep {
        let single = ms.len() * epss.len() == 1;
        let mut series = Vec::new();
        let mut tables: Vec<SweepTable> = Vec::new();
        for &m in &ms {
            for &eps in &epss {
                tables.push(sweep_k(m, eps, gamma, &grid)?);
            }
        }
        for table in &tables {
            let stem = sweep_stem(table.m, table.eps, single);
            let path = ctx
                .out
                .write_table(&stem, table, |w| report::sweep_csv(table, w))?;
            let min = table
                .rows
                .iter()
                .map(|r| r.n_prime0)
                .fold(f64::INFINITY, f64::min);
            println!(
                "sweep M = {}, eps = {}: argmin k = {:.4} (N'0 = {min:.6e})",
                table.m, table.eps, table.argmin_k
            );
            sweeps.push(SweepSummary {
                m: table.m,
                eps: table.eps,
                file: path
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                argmin_k: table.argmin_k,
                min_n_prime0: min,
            });
            series.push(Series {
                name: format!("M = {}, eps = {}", table.m, table.eps),
                points: table.rows.iter().map(|r| (r.k, r.n_prime0)).collect(),
            });
        }
        let plot = LinePlot {
            title: format!("N'0 against k (gamma = {gamma})"),
            x_label: "k".into(),
            y_label: "N'0".into(),
            series,
        };
        ctx.out
            .write_bytes("sweep.svg", plot.to_svg()?.as_bytes())?;
    }

    let out = ComplexityOutput {
        gamma,
        k,
        alpha,
        t_star: t,
        horizon_factor: factor,
        points,
        sweeps,
    };
    ctx.out.write_json("complexity.json", &out)?;
    if !failures.is_empty() {
        return Err(CliError::Numeric(failures.join("; ")));
    }
    Ok(RunInfo::default())
}
