//! Finite-state kernel families `theta -> Pi_theta`.
//!
//! For a fixed parameter the chain is a row-stochastic `S x S` matrix, so the
//! stationary law, the mean field `h(theta)` and the Poisson solution
//! `(I - Pi_theta) v = f(theta, .) - h(theta)` are all dense linear solves.
//! The decomposition of the Markov noise into
//!
//! ```text
//! zeta1_{n+1} = v_n(Y_{n+1}) - (Pi_n v_n)(Y_n)          martingale difference
//! zeta2_{n+1} = v_n(Y_n)     - v_{n+1}(Y_{n+1})          telescoping
//! zeta3_{n+1} = v_{n+1}(Y_{n+1}) - v_n(Y_{n+1})          parameter drift
//! ```
//!
//! (with `v_n = v_{theta_n}`) lives here as well, together with the weighted
//! partial sums `A_n`, `B_n`, `C_n`, `D_n`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngCore;
use serde::Serialize;

use crate::engine::TrajectoryRecord;
use crate::error::{domain, Error, Result};
use crate::numeric::{dist2, norm2, CompensatedSum};
use crate::schedules::StepSchedule;

/// Row-sum tolerance for stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// `f(theta, y, out)`: writes the drift at parameter `theta` and noise value `y`.
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

pub type TransitionFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// `row(theta, state, out)` writes `Pi_theta(state, .)` into `out`.
pub type RowFn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Transition {
    Constant {
        matrix: DMatrix<f64>,
        cumulative: Vec<Vec<f64>>,
    },
    Affine {
        base: DMatrix<f64>,
        perturbations: Vec<DMatrix<f64>>,
    },
    Custom(TransitionFn),
    Rows(RowFn),
}

/// A parameterised family of finite Markov kernels with state embeddings.
#[derive(Clone)]
pub struct KernelFamily {
    values: Vec<Vec<f64>>,
    transition: Transition,
}

impl fmt::Debug for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.transition {
            Transition::Constant { .. } => "constant",
            Transition::Affine { .. } => "affine",
            Transition::Custom(_) => "custom",
            Transition::Rows(_) => "rows",
        };
        f.debug_struct("KernelFamily")
            .field("states", &self.values.len())
            .field("embed_dim", &self.embed_dim())
            .field("transition", &kind)
            .finish()
    }
}

fn check_values(values: &[Vec<f64>]) -> Result<()> {
    if values.is_empty() {
        return domain("kernel needs at least one state");
    }
    let m = values[0].len();
    if values.iter().any(|v| v.len() != m) {
        return domain("state embeddings must share one dimension");
    }
    Ok(())
}

/// Checks nonnegativity and unit row sums.
pub fn check_stochastic(matrix: &DMatrix<f64>) -> Result<()> {
    if matrix.nrows() != matrix.ncols() {
        return domain(format!(
            "transition matrix is {}x{}, expected square",
            matrix.nrows(),
            matrix.ncols()
        ));
    }
    for (i, row) in matrix.row_iter().enumerate() {
        if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return domain(format!("row {i} has a negative or non-finite entry"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return domain(format!("row {i} sums to {sum}"));
        }
    }
    Ok(())
}

fn cumulative_row(row: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    row.map(|p| {
        acc += p;
        acc
    })
    .collect()
}

#[inline]
fn pick(cumulative: &[f64], u: f64) -> usize {
    for (j, &c) in cumulative.iter().enumerate() {
        if u < c {
            return j;
        }
    }
    // rounding left the total a hair below u: take the last reachable state
    cumulative
        .iter()
        .enumerate()
        .rev()
        .find(|(j, &c)| *j == 0 || c > cumulative[j - 1])
        .map(|(j, _)| j)
        .unwrap_or(0)
}

impl KernelFamily {
    /// A kernel that does not depend on the parameter.
    pub fn constant(values: Vec<Vec<f64>>, matrix: DMatrix<f64>) -> Result<Self> {
        check_values(&values)?;
        check_stochastic(&matrix)?;
        if matrix.nrows() != values.len() {
            return domain("matrix size does not match the number of states");
        }
        let cumulative = matrix
            .row_iter()
            .map(|r| cumulative_row(r.iter().copied()))
            .collect();
        Ok(Self {
            values,
            transition: Transition::Constant { matrix, cumulative },
        })
    }

    /// `Pi(theta) = clip_rows(Pi_0 + sum_i theta_i Pi_i)`: negative entries are
    /// clipped to zero and each row renormalised. A row that clips to all
    /// zeros falls back to the corresponding row of `Pi_0`.
    pub fn affine(
        values: Vec<Vec<f64>>,
        base: DMatrix<f64>,
        perturbations: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        check_values(&values)?;
        check_stochastic(&base)?;
        let s = values.len();
        if base.nrows() != s {
            return domain("base matrix size does not match the number of states");
        }
        if perturbations
            .iter()
            .any(|p| p.nrows() != s || p.ncols() != s)
        {
            return domain("perturbation matrices must be S x S");
        }
        if perturbations.is_empty() {
            return Self::constant(values, base);
        }
        Ok(Self {
            values,
            transition: Transition::Affine {
                base,
                perturbations,
            },
        })
    }

    /// Arbitrary parameter dependence. Stochasticity is checked whenever the
    /// matrix is requested through [`KernelFamily::matrix`].
    pub fn from_fn(values: Vec<Vec<f64>>, transition: TransitionFn) -> Result<Self> {
        check_values(&values)?;
        Ok(Self {
            values,
            transition: Transition::Custom(transition),
        })
    }

    /// Row-wise parameter dependence; cheaper to sample than [`KernelFamily::from_fn`]
    /// because no matrix is built per draw.
    pub fn from_row_fn(values: Vec<Vec<f64>>, row: RowFn) -> Result<Self> {
        check_values(&values)?;
        Ok(Self {
            values,
            transition: Transition::Rows(row),
        })
    }

    pub fn state_count(&self) -> usize {
        self.values.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn value(&self, state: usize) -> &[f64] {
        &self.values[state]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.transition, Transition::Constant { .. })
    }

    fn affine_row(
        &self,
        base: &DMatrix<f64>,
        perts: &[DMatrix<f64>],
        theta: &[f64],
        i: usize,
    ) -> Vec<f64> {
        let s = self.values.len();
        let mut row: Vec<f64> = (0..s)
            .map(|j| {
                let mut x = base[(i, j)];
                for (p, t) in perts.iter().zip(theta) {
                    x += t * p[(i, j)];
                }
                x.max(0.0)
            })
            .collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 && total.is_finite() {
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            row = base.row(i).iter().copied().collect();
        }
        row
    }

    /// `Pi_theta`, validated.
    pub fn matrix(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.matrix_unchecked(theta);
        if m.nrows() != self.values.len() {
            return domain("transition callable returned a matrix of the wrong size");
        }
        check_stochastic(&m)?;
        Ok(m)
    }

    fn matrix_unchecked(&self, theta: &[f64]) -> DMatrix<f64> {
        match &self.transition {
            Transition::Constant { matrix, .. } => matrix.clone(),
            Transition::Affine {
                base,
                perturbations,
            } => {
                let s = self.values.len();
                let mut m = DMatrix::zeros(s, s);
                for i in 0..s {
                    for (j, x) in self
                        .affine_row(base, perturbations, theta, i)
                        .into_iter()
                        .enumerate()
                    {
                        m[(i, j)] = x;
                    }
                }
                m
            }
            Transition::Custom(f) => f(theta),
            Transition::Rows(f) => {
                let s = self.values.len();
                let mut m = DMatrix::zeros(s, s);
                let mut row = vec![0.0; s];
                for i in 0..s {
                    f(theta, i, &mut row);
                    for (j, x) in row.iter().enumerate() {
                        m[(i, j)] = *x;
                    }
                }
                m
            }
        }
    }

    /// Draws `Y_{n+1} ~ Pi_theta(state, .)` with one uniform variate; a
    /// one-state chain consumes no randomness.
    pub fn sample_next<R: RngCore + ?Sized>(
        &self,
        theta: &[f64],
        state: usize,
        rng: &mut R,
    ) -> usize {
        if self.values.len() == 1 {
            return 0;
        }
        let u: f64 = rng.gen();
        match &self.transition {
            Transition::Constant { cumulative, .. } => pick(&cumulative[state], u),
            Transition::Affine {
                base,
                perturbations,
            } => {
                let row = self.affine_row(base, perturbations, theta, state);
                pick(&cumulative_row(row.into_iter()), u)
            }
            Transition::Custom(f) => {
                let m = f(theta);
                let cum = cumulative_row(m.row(state).iter().copied());
                pick(&cum, u)
            }
            Transition::Rows(f) => {
                let s = self.values.len();
                let mut stack = [0.0f64; 16];
                let mut heap = Vec::new();
                let row: &mut [f64] = if s <= 16 {
                    &mut stack[..s]
                } else {
                    heap.resize(s, 0.0);
                    &mut heap
                };
                f(theta, state, row);
                let mut acc = 0.0;
                for x in row.iter_mut() {
                    acc += *x;
                    *x = acc;
                }
                pick(row, u)
            }
        }
    }

    /// Verifies that `Pi_theta` has exactly one closed communicating class.
    pub fn check_unique(&self, theta: &[f64]) -> Result<()> {
        let m = self.matrix(theta)?;
        unique_closed_class(&m).map(|_| ())
    }

    /// Reads the kernel CSV format: a header row `S,m`, `S` rows of state
    /// embeddings, `S` rows of `Pi_0`, then optional blocks of `S` rows, one
    /// perturbation matrix per parameter coordinate. `#` starts a comment.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let mut vals = Vec::with_capacity(rec.len());
            for (col, field) in rec.iter().enumerate() {
                let v = field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    column: col + 1,
                    message: format!("not a number: {field:?}"),
                })?;
                vals.push(v);
            }
            rows.push((line, vals));
        }
        let (hline, header) = rows.first().ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "empty kernel file".into(),
        })?;
        if header.len() != 2 || header.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
            return Err(Error::Parse {
                line: *hline,
                column: 1,
                message: "header must be two positive integers S,m".into(),
            });
        }
        let s = header[0] as usize;
        let m = header[1] as usize;
        let body = &rows[1..];
        if body.len() < 2 * s || !(body.len() - 2 * s).is_multiple_of(s) {
            let line = body.last().map(|r| r.0).unwrap_or(*hline);
            return Err(Error::Parse {
                line,
                column: 1,
                message: format!(
                    "expected 2S + kS rows after the header (S = {s}), found {}",
                    body.len()
                ),
            });
        }
        let expect = |rows: &[(usize, Vec<f64>)], width: usize| -> Result<()> {
            for (line, r) in rows {
                if r.len() != width {
                    return Err(Error::Parse {
                        line: *line,
                        column: r.len().min(width) + 1,
                        message: format!("expected {width} fields, found {}", r.len()),
                    });
                }
            }
            Ok(())
        };
        expect(&body[..s], m)?;
        expect(&body[s..], s)?;
        let values = body[..s].iter().map(|r| r.1.clone()).collect();
        let to_matrix = |block: &[(usize, Vec<f64>)]| DMatrix::from_fn(s, s, |i, j| block[i].1[j]);
        let base = to_matrix(&body[s..2 * s]);
        let perts = body[2 * s..].chunks(s).map(to_matrix).collect();
        Self::affine(values, base, perts)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Strongly connected components of the support graph (Kosaraju).
fn components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let s = m.nrows();
    let succ: Vec<Vec<usize>> = (0..s)
        .map(|i| (0..s).filter(|&j| m[(i, j)] > 0.0).collect())
        .collect();
    let pred: Vec<Vec<usize>> = (0..s)
        .map(|j| (0..s).filter(|&i| m[(i, j)] > 0.0).collect())
        .collect();

    let mut order = Vec::with_capacity(s);
    let mut seen = vec![false; s];
    for root in 0..s {
        if seen[root] {
            continue;
        }
        // iterative post-order
        let mut stack = vec![(root, 0usize)];
        seen[root] = true;
        while let Some((node, idx)) = stack.pop() {
            if idx < succ[node].len() {
                stack.push((node, idx + 1));
                let next = succ[node][idx];
                if !seen[next] {
                    seen[next] = true;
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
    }
    let mut comp = vec![usize::MAX; s];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![root];
        comp[root] = id;
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            for &p in &pred[node] {
                if comp[p] == usize::MAX {
                    comp[p] = id;
                    members.push(p);
                    stack.push(p);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Returns the single closed class, or an error listing all closed classes.
pub fn unique_closed_class(m: &DMatrix<f64>) -> Result<Vec<usize>> {
    let comps = components(m);
    if comps.len() == 1 {
        return Ok(comps.into_iter().next().unwrap());
    }
    let s = m.nrows();
    let mut which = vec![0usize; s];
    for (c, members) in comps.iter().enumerate() {
        for &i in members {
            which[i] = c;
        }
    }
    let mut closed: Vec<Vec<usize>> = comps
        .iter()
        .enumerate()
        .filter(|(c, members)| {
            members
                .iter()
                .all(|&i| (0..s).all(|j| m[(i, j)] == 0.0 || which[j] == *c))
        })
        .map(|(_, members)| members.clone())
        .collect();
    if closed.len() == 1 {
        Ok(closed.pop().unwrap())
    } else {
        closed.sort();
        Err(Error::NonUniqueStationary { classes: closed })
    }
}

fn solve_refined(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or_else(|| {
        Error::Singular("linear system beyond the known rank-one deficiency".into())
    })?;
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite solution".into()));
    }
    Ok(x)
}

fn stationary_of(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    unique_closed_class(m)?;
    let s = m.nrows();
    // pi (I - P) = 0 transposed, with the last equation replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::identity(s, s) - m.transpose();
    for j in 0..s {
        a[(s - 1, j)] = 1.0;
    }
    let mut b = DMatrix::<f64>::zeros(s, 1);
    b[(s - 1, 0)] = 1.0;
    let x = solve_refined(&a, &b)?;
    Ok(x.column(0).into_owned())
}

/// Stationary law `Gamma_theta` of `Pi_theta`.
pub fn stationary(kernel: &KernelFamily, theta: &[f64]) -> Result<Vec<f64>> {
    let m = kernel.matrix(theta)?;
    Ok(stationary_of(&m)?.iter().copied().collect())
}

/// `max_j |(pi Pi)_j - pi_j|`.
pub fn stationary_residual(m: &DMatrix<f64>, pi: &[f64]) -> f64 {
    let p = DVector::from_column_slice(pi);
    let lhs = m.transpose() * &p;
    (lhs - p).amax()
}

fn drift_table<F>(kernel: &KernelFamily, f: &F, theta: &[f64], out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + ?Sized,
{
    let s = kernel.state_count();
    let mut table = DMatrix::zeros(s, out_dim);
    let mut buf = vec![0.0; out_dim];
    for i in 0..s {
        f(theta, kernel.value(i), &mut buf);
        for (c, x) in buf.iter().enumerate() {
            table[(i, c)] = *x;
        }
    }
    table
}

/// `h(theta) = sum_s pi(s) f(theta, y(s))`.
pub fn mean_field<F>(
    kernel: &KernelFamily,
    f: &F,
    theta: &[f64],
    out_dim: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + ?Sized,
{
    let pi = stationary(kernel, theta)?;
    let table = drift_table(kernel, f, theta, out_dim);
    Ok(weighted_rows(&table, &pi))
}

fn weighted_rows(table: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (0..table.ncols())
        .map(|c| {
            let mut acc = CompensatedSum::new();
            for (i, wi) in w.iter().enumerate() {
                acc.add(wi * table[(i, c)]);
            }
            acc.value()
        })
        .collect()
}

/// Normalised solution of the Poisson equation at one parameter value.
#[derive(Debug, Clone, Serialize)]
pub struct PoissonSolution {
    /// `v[s]` is the `d`-vector `v_theta(s)`.
    pub v: Vec<Vec<f64>>,
    /// `(Pi_theta v)[s]`.
    pub pi_v: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub h: Vec<f64>,
    /// `max_s |v(s) - (Pi v)(s) - (f(theta, y(s)) - h)|_inf`
    pub residual: f64,
    /// `max_c |sum_s pi(s) v(s)_c|`
    pub normalization: f64,
    /// `max_j |(pi Pi)_j - pi_j|`
    pub stationary_residual: f64,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
}

/// Solves `(I - Pi_theta) v = f(theta, .) - h(theta)` subject to `pi . v = 0`.
///
/// The singular system is closed with the rank-one term `1 pi^T`: the matrix
/// `I - Pi + 1 pi^T` is invertible for a unichain kernel and its solution
/// automatically satisfies the normalisation.
pub fn solve_poisson<F>(
    kernel: &KernelFamily,
    f: &F,
    theta: &[f64],
    out_dim: usize,
) -> Result<PoissonSolution>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + ?Sized,
{
    let m = kernel.matrix(theta)?;
    let table = drift_table(kernel, f, theta, out_dim);
    poisson_with_matrix(m, table)
}

pub(crate) fn poisson_with_matrix(m: DMatrix<f64>, table: DMatrix<f64>) -> Result<PoissonSolution> {
    let s = m.nrows();
    let out_dim = table.ncols();
    let pi = stationary_of(&m)?;
    let pi_vec: Vec<f64> = pi.iter().copied().collect();
    let h = weighted_rows(&table, &pi_vec);
    let mut rhs = table.clone();
    for i in 0..s {
        for c in 0..out_dim {
            rhs[(i, c)] -= h[c];
        }
    }
    let ones = DVector::<f64>::from_element(s, 1.0);
    let z = DMatrix::<f64>::identity(s, s) - &m + &ones * pi.transpose();
    let v = solve_refined(&z, &rhs)?;
    let pv = &m * &v;

    let residual = (&v - &pv - &rhs).amax();
    let normalization = (pi.transpose() * &v).amax();
    let stationary_residual = stationary_residual(&m, &pi_vec);
    let rows = |x: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..s).map(|i| x.row(i).iter().copied().collect()).collect()
    };
    Ok(PoissonSolution {
        v: rows(&v),
        pi_v: rows(&pv),
        pi: pi_vec,
        h,
        residual,
        normalization,
        stationary_residual,
        matrix: m,
    })
}

/// The noise decomposition along one recorded trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseDecomposition {
    pub dim: usize,
    /// Per step `k`, the vectors `zeta^{(i)}_{k+1}` flattened row-major.
    pub zeta1: Vec<f64>,
    pub zeta2: Vec<f64>,
    pub zeta3: Vec<f64>,
    /// `A_n` for `n = 0..=steps` (relative to the trajectory start), flattened.
    pub a_sums: Vec<f64>,
    pub b_sums: Vec<f64>,
    pub c_sums: Vec<f64>,
    pub d_sums: Vec<f64>,
    /// `max_k |zeta1 + zeta2 + zeta3 - (f(theta_k, y(Y_k)) - h(theta_k))|_inf`
    pub max_reconstruction_error: f64,
    /// `max_k |sum_s' Pi(Y_k, s') v(s') - (Pi v)(Y_k)|_inf`, the exact
    /// conditional mean of `zeta1` given the current state.
    pub max_conditional_mean: f64,
    pub max_poisson_residual: f64,
}

impl NoiseDecomposition {
    pub fn steps(&self) -> usize {
        self.zeta1.len() / self.dim
    }
}

/// Splits `f(theta_k, y(Y_k)) - h(theta_k)` along `traj` into the three
/// `zeta` sequences and accumulates their `a(k)`-weighted partial sums.
pub fn decompose<F>(
    traj: &TrajectoryRecord,
    kernel: &KernelFamily,
    f: &F,
    sched: &StepSchedule,
) -> Result<NoiseDecomposition>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + ?Sized,
{
    let d = traj.dim;
    let len = traj.len();
    if traj.states.len() != len {
        return domain(format!(
            "trajectory has {len} iterates but {} states",
            traj.states.len()
        ));
    }
    if traj.stride != 1 {
        return domain("decomposition needs an unthinned trajectory (stride 1)");
    }
    let steps = len.saturating_sub(1);
    let increments = traj.increments.as_ref();
    if let Some(inc) = increments {
        if inc.len() < steps * d {
            return domain("martingale increments shorter than the trajectory");
        }
    }

    let solutions: Vec<PoissonSolution> = (0..len)
        .map(|i| solve_poisson(kernel, f, traj.theta(i), d))
        .collect::<Result<_>>()?;

    let mut out = NoiseDecomposition {
        dim: d,
        zeta1: Vec::with_capacity(steps * d),
        zeta2: Vec::with_capacity(steps * d),
        zeta3: Vec::with_capacity(steps * d),
        a_sums: vec![0.0; d],
        b_sums: vec![0.0; d],
        c_sums: vec![0.0; d],
        d_sums: vec![0.0; d],
        max_reconstruction_error: 0.0,
        max_conditional_mean: 0.0,
        max_poisson_residual: solutions.iter().fold(0.0, |m, s| m.max(s.residual)),
    };
    let mut acc = vec![[CompensatedSum::new(); 4]; d];
    let mut fbuf = vec![0.0; d];

    for k in 0..steps {
        let a = sched.step(traj.n_start + k as u64)?;
        let (cur, next) = (&solutions[k], &solutions[k + 1]);
        let (y, y_next) = (traj.states[k], traj.states[k + 1]);
        f(traj.theta(k), kernel.value(y), &mut fbuf);
        for c in 0..d {
            let z1 = cur.v[y_next][c] - cur.pi_v[y][c];
            let z2 = cur.v[y][c] - next.v[y_next][c];
            let z3 = next.v[y_next][c] - cur.v[y_next][c];
            let target = fbuf[c] - cur.h[c];
            out.max_reconstruction_error = out
                .max_reconstruction_error
                .max((z1 + z2 + z3 - target).abs());

            // conditional mean of v(Y_{k+1}) by an explicit successor sum
            let mut cm = CompensatedSum::new();
            for (s2, vs) in cur.v.iter().enumerate() {
                cm.add(cur.matrix[(y, s2)] * vs[c]);
            }
            out.max_conditional_mean = out
                .max_conditional_mean
                .max((cm.value() - cur.pi_v[y][c]).abs());

            out.zeta1.push(z1);
            out.zeta2.push(z2);
            out.zeta3.push(z3);
            let m_inc = increments.map(|inc| inc[k * d + c]).unwrap_or(0.0);
            acc[c][0].add(a * z1);
            acc[c][1].add(a * z2);
            acc[c][2].add(a * z3);
            acc[c][3].add(a * m_inc);
        }
        for sums in &acc {
            out.a_sums.push(sums[0].value());
            out.b_sums.push(sums[1].value());
            out.c_sums.push(sums[2].value());
            out.d_sums.push(sums[3].value());
        }
    }
    Ok(out)
}

/// Grid estimate of the growth/Lipschitz constant of `theta -> v_theta`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PoissonConstants {
    /// `max sup_s |v_theta(s)| / (1 + |y(s)|)` over the grid
    pub growth: f64,
    /// `max |v_theta(s) - v_theta'(s)| / (|theta - theta'| (1 + |y(s)|))` over grid pairs
    pub lipschitz: f64,
}

impl PoissonConstants {
    pub fn c_r(&self) -> f64 {
        self.growth.max(self.lipschitz)
    }
}

/// Samples the Poisson solution on `grid` (consecutive points form the pairs
/// for the Lipschitz ratio). The result is an estimate, not a certificate.
pub fn estimate_poisson_constants<F>(
    kernel: &KernelFamily,
    f: &F,
    grid: &[Vec<f64>],
) -> Result<PoissonConstants>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + ?Sized,
{
    if grid.is_empty() {
        return domain("empty parameter grid");
    }
    let d = grid[0].len();
    let sols: Vec<PoissonSolution> = grid
        .iter()
        .map(|th| solve_poisson(kernel, f, th, d))
        .collect::<Result<_>>()?;
    let weight = |s: usize| 1.0 + norm2(kernel.value(s));
    let mut growth = 0.0_f64;
    for sol in &sols {
        for (s, v) in sol.v.iter().enumerate() {
            growth = growth.max(norm2(v) / weight(s));
        }
    }
    let mut lipschitz = 0.0_f64;
    for w in 0..sols.len().saturating_sub(1) {
        let gap = dist2(&grid[w], &grid[w + 1]);
        if gap == 0.0 {
            continue;
        }
        for s in 0..kernel.state_count() {
            let diff = dist2(&sols[w].v[s], &sols[w + 1].v[s]);
            lipschitz = lipschitz.max(diff / (gap * weight(s)));
        }
    }
    Ok(PoissonConstants { growth, lipschitz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_state(p: f64, q: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0 - p, p, q, 1.0 - q])
    }

    fn y_field(_t: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = y[0];
    }

    #[test]
    fn two_state_closed_form() {
        let k = KernelFamily::constant(vec![vec![1.0], vec![-1.0]], two_state(0.1, 0.5)).unwrap();
        let pi = stationary(&k, &[0.0]).unwrap();
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-14);
        assert!((pi[1] - 1.0 / 6.0).abs() < 1e-14);
        let h = mean_field(&k, &y_field, &[0.0], 1).unwrap();
        assert!((h[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn single_state_and_doubly_stochastic() {
        let k = KernelFamily::constant(vec![vec![0.0]], DMatrix::identity(1, 1)).unwrap();
        assert_eq!(stationary(&k, &[0.0]).unwrap(), vec![1.0]);

        let m = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.3, 0.2, 0.5, 0.5, 0.3, 0.2]);
        let k = KernelFamily::constant(vec![vec![0.0]; 3], m).unwrap();
        for p in stationary(&k, &[0.0]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_chain_poisson() {
        let k = KernelFamily::constant(vec![vec![1.0], vec![-1.0]], two_state(0.5, 0.5)).unwrap();
        let sol = solve_poisson(&k, &y_field, &[0.0], 1).unwrap();
        assert!(sol.h[0].abs() < 1e-15);
        assert!((sol.v[0][0] - 1.0).abs() < 1e-14);
        assert!((sol.v[1][0] + 1.0).abs() < 1e-14);
        assert!(sol.residual < 1e-14);
    }

    #[test]
    fn state_independent_field_has_zero_solution() {
        let k = KernelFamily::constant(vec![vec![1.0], vec![-1.0]], two_state(0.3, 0.6)).unwrap();
        let f = |t: &[f64], _y: &[f64], out: &mut [f64]| out[0] = -t[0];
        let sol = solve_poisson(&k, &f, &[2.5], 1).unwrap();
        assert!((sol.h[0] + 2.5).abs() < 1e-14);
        assert!(sol.v.iter().all(|v| v[0].abs() < 1e-14));
    }

    #[test]
    fn reducible_chain_reports_classes() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.5, 0.5, 0.0, //
                0.0, 0.5, 0.5, 0.0, //
                0.25, 0.25, 0.25, 0.25,
            ],
        );
        let k = KernelFamily::constant(vec![vec![0.0]; 4], m).unwrap();
        match stationary(&k, &[0.0]) {
            Err(Error::NonUniqueStationary { classes }) => {
                assert_eq!(classes, vec![vec![0], vec![1, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transient_states_allowed_with_one_closed_class() {
        let m = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5]);
        let k = KernelFamily::constant(vec![vec![1.0], vec![2.0], vec![3.0]], m).unwrap();
        let pi = stationary(&k, &[0.0]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14 && pi[2].abs() < 1e-14);
        let sol = solve_poisson(&k, &y_field, &[0.0], 1).unwrap();
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.5, 0.5]);
        assert!(KernelFamily::constant(vec![vec![0.0]; 2], m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.2, -0.2, 0.5, 0.5]);
        assert!(KernelFamily::constant(vec![vec![0.0]; 2], m).is_err());
    }

    #[test]
    fn affine_family_clips_and_renormalises() {
        let base = two_state(0.5, 0.5);
        let pert = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        let k = KernelFamily::affine(vec![vec![1.0], vec![-1.0]], base, vec![pert]).unwrap();
        let m = k.matrix(&[0.25]).unwrap();
        assert!((m[(0, 0)] - 0.75).abs() < 1e-15);
        let m = k.matrix(&[2.0]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn kernel_csv_parsing() {
        let text = "2,1\n1\n-1\n0.9,0.1\n0.5,0.5\n# perturbation for theta_0\n-0.1,0.1\n0,0\n";
        let k = KernelFamily::from_csv_str(text).unwrap();
        assert_eq!(k.state_count(), 2);
        let m = k.matrix(&[1.0]).unwrap();
        assert!((m[(0, 0)] - 0.8).abs() < 1e-15);

        let bad = "2,1\n1\n-1\n0.9,0.1\n0.5\n";
        match KernelFamily::from_csv_str(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        match KernelFamily::from_csv_str("2,1\n1\nx\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empirical_kernel_recovery() {
        // 1e6 draws from each row of a 3-state kernel; 4-sigma binomial margins
        let m = DMatrix::from_row_slice(3, 3, &[0.7, 0.2, 0.1, 0.05, 0.9, 0.05, 0.3, 0.3, 0.4]);
        let families = [
            KernelFamily::constant(vec![vec![0.0]; 3], m.clone()).unwrap(),
            KernelFamily::from_fn(
                vec![vec![0.0]; 3],
                Arc::new({
                    let m = m.clone();
                    move |_t: &[f64]| m.clone()
                }),
            )
            .unwrap(),
            KernelFamily::from_row_fn(
                vec![vec![0.0]; 3],
                Arc::new(move |_t: &[f64], i: usize, out: &mut [f64]| {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = m[(i, j)];
                    }
                }),
            )
            .unwrap(),
        ];
        let n = 1_000_000;
        for (fi, k) in families.iter().enumerate() {
            let m = k.matrix(&[0.0]).unwrap();
            for row in 0..3 {
                let mut rng = stream(1000 + row as u64);
                let mut counts = [0usize; 3];
                for _ in 0..n {
                    counts[k.sample_next(&[0.0], row, &mut rng)] += 1;
                }
                for (j, &c) in counts.iter().enumerate() {
                    let p = m[(row, j)];
                    let margin = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
                    let phat = c as f64 / n as f64;
                    assert!(
                        (phat - p).abs() <= margin,
                        "family {fi} row {row} col {j}: {phat} vs {p}"
                    );
                }
            }
        }
    }
}
