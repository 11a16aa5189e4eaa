//! Penalized quantile regression with a B-spline design.
//!
//! Minimizes `sum_i rho_tau(y_i - x_i'b) + (lambda/2) b'Pb` where `P = D'D`.
//! The solver runs majorize-minimize iterations on a smoothed check loss
//! (each step is a weighted ridge solve) while the smoothing width is shrunk
//! toward zero, then polishes the result to an exact vertex by solving the
//! optimality system on a candidate set of zero-residual observations. A
//! polished solution is accepted only when its multipliers and residual signs
//! satisfy the optimality conditions, which certifies global optimality.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{build_design, BSplineBasis, BasisError};
use crate::linalg::spd_solve;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("tau must lie in (0, 1), got {0}")]
    BadTau(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular system in {context}")]
    Singular { context: &'static str },
    #[error(
        "solver did not converge for tau={tau}, lambda={lambda} after {iterations} iterations \
         (last relative change {last_change:e}, objective {objective})"
    )]
    NonConvergence { tau: f64, lambda: f64, iterations: usize, last_change: f64, objective: f64 },
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("lambda grid must be sorted ascending and non-negative")]
    UnsortedGrid,
    #[error("GACV criterion is undefined at every grid point: {0:?}")]
    GacvDegenerate(Vec<f64>),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Check loss `u (tau - 1{u < 0})`.
pub fn check_loss(u: f64, tau: f64) -> Result<f64, FitError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FitError::BadTau(tau));
    }
    Ok(rho(u, tau))
}

#[inline]
fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Design matrix stored as distinct rows plus a row index per observation.
///
/// Panel regressions repeat the same covariate row for every county in a
/// year; storing each distinct row once makes the normal-equation build cost
/// O(n + G p^2) instead of O(n p^2).
#[derive(Debug, Clone)]
pub struct Design {
    ncols: usize,
    rows: Vec<f64>,
    obs_row: Vec<usize>,
    group_size: Vec<usize>,
}

impl Design {
    /// One observation per row of a row-major `nrows x ncols` buffer.
    pub fn from_row_major(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self, FitError> {
        Self::grouped(ncols, data, (0..nrows).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FitError> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(FitError::Dimension("ragged design rows".into()));
        }
        Self::from_row_major(rows.len(), ncols, rows.concat())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self, FitError> {
        let data: Vec<f64> = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self::from_row_major(m.nrows(), m.ncols(), data)
    }

    /// Distinct rows (row-major, `ncols` wide) and the row used by each
    /// observation.
    pub fn grouped(ncols: usize, rows: Vec<f64>, obs_row: Vec<usize>) -> Result<Self, FitError> {
        if ncols == 0 || rows.len() % ncols != 0 {
            return Err(FitError::Dimension(format!("{} values do not form rows of width {ncols}", rows.len())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite("design"));
        }
        let g = rows.len() / ncols;
        let mut group_size = vec![0; g];
        for &r in &obs_row {
            if r >= g {
                return Err(FitError::Dimension(format!("observation refers to row {r} of {g}")));
            }
            group_size[r] += 1;
        }
        Ok(Self { ncols, rows, obs_row, group_size })
    }

    pub fn n_obs(&self) -> usize {
        self.obs_row.len()
    }

    pub fn n_cols(&self) -> usize {
        self.ncols
    }

    pub fn n_rows(&self) -> usize {
        self.group_size.len()
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.rows[g * self.ncols..(g + 1) * self.ncols]
    }

    /// Distinct-row index of observation `i`.
    pub fn obs_row(&self, i: usize) -> usize {
        self.obs_row[i]
    }

    /// Fitted value per distinct row.
    pub fn row_fits(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|g| dot(self.row(g), beta)).collect()
    }

    /// `sum_g w_g x_g x_g'` for per-row weights.
    fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let p = self.ncols;
        let mut a = DMatrix::zeros(p, p);
        for (g, &wg) in w.iter().enumerate() {
            if wg == 0.0 {
                continue;
            }
            let x = self.row(g);
            for j in 0..p {
                let xj = wg * x[j];
                if xj == 0.0 {
                    continue;
                }
                for k in j..p {
                    a[(j, k)] += xj * x[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                a[(j, k)] = a[(k, j)];
            }
        }
        a
    }

    /// `sum_g c_g x_g`.
    fn weighted_sum(&self, c: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.ncols);
        for (g, &cg) in c.iter().enumerate() {
            if cg != 0.0 {
                for (bj, xj) in b.iter_mut().zip(self.row(g)) {
                    *bj += cg * xj;
                }
            }
        }
        b
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Iteration cap for the majorize-minimize loop.
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-10 }
    }
}

/// Solution for one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    pub lambda: f64,
    pub coefficients: Vec<f64>,
    /// Check loss plus penalty at `coefficients`.
    pub objective: f64,
    pub check_loss: f64,
    pub penalty: f64,
    pub iterations: usize,
    /// Whether the optimality conditions were verified at the solution.
    pub certified: bool,
    /// Observations fitted with zero residual by the certified vertex.
    pub interpolated: usize,
}

impl QuantileFit {
    /// Inner product of a design row with the coefficients.
    pub fn predict(&self, row: &[f64]) -> f64 {
        dot(row, &self.coefficients)
    }
}

/// Prediction at raw covariates through the bases that built the design.
pub fn predict_quantile(
    fit: &QuantileFit,
    bases: &[&BSplineBasis],
    covariates: &[f64],
    clamp: bool,
) -> Result<f64, FitError> {
    let row = build_design(bases, covariates, clamp)?;
    if row.len() != fit.coefficients.len() {
        return Err(FitError::Dimension(format!(
            "design row has {} entries, fit has {} coefficients",
            row.len(),
            fit.coefficients.len()
        )));
    }
    Ok(fit.predict(&row))
}

/// Penalized objective evaluated exactly.
pub fn objective(design: &Design, y: &[f64], tau: f64, lambda: f64, penalty: &DMatrix<f64>, beta: &[f64]) -> (f64, f64) {
    let fits = design.row_fits(beta);
    let loss: f64 = y.iter().enumerate().map(|(i, &yi)| rho(yi - fits[design.obs_row[i]], tau)).sum();
    (loss, 0.5 * lambda * quad_form(penalty, beta))
}

fn quad_form(p: &DMatrix<f64>, b: &[f64]) -> f64 {
    let n = b.len();
    let mut s = 0.0;
    for j in 0..n {
        let mut t = 0.0;
        for k in 0..n {
            t += p[(j, k)] * b[k];
        }
        s += b[j] * t;
    }
    s
}

struct Problem<'a> {
    design: &'a Design,
    y: &'a [f64],
    tau: f64,
    lambda: f64,
    penalty: &'a DMatrix<f64>,
    scale: f64,
}

fn validate(design: &Design, y: &[f64], tau: f64, lambda: f64, penalty: &DMatrix<f64>) -> Result<(), FitError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FitError::BadTau(tau));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(FitError::BadLambda(lambda));
    }
    if design.n_obs() != y.len() {
        return Err(FitError::Dimension(format!("{} observations but {} responses", design.n_obs(), y.len())));
    }
    if y.is_empty() {
        return Err(FitError::Dimension("no observations".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite("response"));
    }
    let p = design.n_cols();
    if penalty.nrows() != p || penalty.ncols() != p {
        return Err(FitError::Dimension(format!(
            "penalty is {}x{}, design has {p} columns",
            penalty.nrows(),
            penalty.ncols()
        )));
    }
    if penalty.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite("penalty"));
    }
    Ok(())
}

fn response_scale(y: &[f64]) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(f64::total_cmp);
    let med = v[v.len() / 2];
    let mad = y.iter().map(|x| (x - med).abs()).sum::<f64>() / y.len() as f64;
    if mad > 0.0 {
        return mad;
    }
    let m = y.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if m > 0.0 { m } else { 1.0 }
}

/// Fit one quantile level from a cold start.
pub fn fit_pqr(
    design: &Design,
    y: &[f64],
    tau: f64,
    lambda: f64,
    penalty: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<QuantileFit, FitError> {
    fit_pqr_from(design, y, tau, lambda, penalty, None, opts)
}

/// Fit one quantile level, optionally warm-started from `start`.
pub fn fit_pqr_from(
    design: &Design,
    y: &[f64],
    tau: f64,
    lambda: f64,
    penalty: &DMatrix<f64>,
    start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<QuantileFit, FitError> {
    validate(design, y, tau, lambda, penalty)?;
    let p = design.n_cols();
    if let Some(s) = start {
        if s.len() != p || s.iter().any(|v| !v.is_finite()) {
            return Err(FitError::Dimension("invalid warm start".into()));
        }
    }
    let prob = Problem {
        design,
        y,
        tau,
        lambda,
        penalty,
        scale: response_scale(y),
    };
    let n = y.len();
    let g = design.n_rows();

    let mut beta: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => {
            let counts: Vec<f64> = design.group_size.iter().map(|&c| c as f64).collect();
            let mut sy = vec![0.0; g];
            for i in 0..n {
                sy[design.obs_row[i]] += y[i];
            }
            let a = design.weighted_gram(&counts);
            let b = design.weighted_sum(&sy);
            solve_ridged(a, penalty, lambda, &b).ok_or(FitError::Singular { context: "initial least squares" })?
        }
    };

    let s = prob.scale;
    // Smoothing widths: coarse levels hand over to the exact finisher at
    // `handover`; finer levels are only used if the finisher fails.
    let handover = 1e-4 * s;
    let eps_min = 1e-9 * s;
    let mut eps = if start.is_some() { 1e-3 * s } else { 1e-1 * s };
    let mut best_beta = beta.clone();
    let mut best_obj = f64::INFINITY;
    let mut prev_smooth = f64::INFINITY;
    let mut prev_exact = f64::INFINITY;
    let mut level_iters = 0usize;
    let mut last_change = f64::INFINITY;
    let mut converged = false;
    let mut tried_finisher = false;
    let mut iterations = 0usize;
    let mut sw = vec![0.0; g];
    let mut swy = vec![0.0; g];

    while iterations < opts.max_iter {
        let fits = design.row_fits(&beta);
        sw.iter_mut().for_each(|v| *v = 0.0);
        swy.iter_mut().for_each(|v| *v = 0.0);
        let mut loss = 0.0;
        let mut smooth = 0.0;
        for i in 0..n {
            let gi = design.obs_row[i];
            let r = y[i] - fits[gi];
            loss += rho(r, tau);
            let a = r.abs();
            let h = if a >= eps { a } else { 0.5 * (r * r / eps + eps) };
            smooth += 0.5 * h + (tau - 0.5) * r;
            let w = 0.5 / a.max(eps);
            sw[gi] += w;
            swy[gi] += w * y[i];
        }
        let pen = 0.5 * lambda * quad_form(penalty, &beta);
        let exact = loss + pen;
        smooth += pen;
        if exact < best_obj {
            best_obj = exact;
            best_beta.clone_from(&beta);
        }
        if best_obj == 0.0 {
            converged = true;
            break;
        }

        let smooth_change = (prev_smooth - smooth).abs() / smooth.abs().max(f64::MIN_POSITIVE);
        prev_smooth = smooth;
        level_iters += 1;
        let level_tol = if eps > handover { 1e-6 } else { 1e-9 };
        if smooth_change < level_tol || level_iters >= 40 {
            if eps <= handover && !tried_finisher {
                tried_finisher = true;
                if let Some(f) = active_set(&prob, &best_beta, iterations) {
                    return Ok(f);
                }
            }
            if eps > eps_min {
                eps = (eps * 0.1).max(eps_min);
                level_iters = 0;
                prev_smooth = f64::INFINITY;
                continue;
            }
            last_change = (prev_exact - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
            if last_change < opts.tol {
                converged = true;
                break;
            }
        }
        if eps <= eps_min {
            prev_exact = exact;
        }

        let rhs: Vec<f64> = (0..g)
            .map(|k| swy[k] + (tau - 0.5) * design.group_size[k] as f64)
            .collect();
        let a = design.weighted_gram(&sw);
        let b = design.weighted_sum(&rhs);
        match solve_ridged(a, penalty, lambda, &b) {
            Some(next) => beta = next,
            None => return Err(FitError::Singular { context: "reweighted step" }),
        }
        iterations += 1;
    }

    if best_obj > 0.0 {
        if let Some(f) = active_set(&prob, &best_beta, iterations) {
            return Ok(f);
        }
        if let Some(f) = zero_vertex(&prob, &best_beta, iterations) {
            return Ok(f);
        }
        if let Some(f) = conic_finish(&prob, &best_beta, iterations) {
            return Ok(f);
        }
    }
    if !converged {
        return Err(FitError::NonConvergence { tau, lambda, iterations, last_change, objective: best_obj });
    }
    let (loss, pen) = objective(design, y, tau, lambda, penalty, &best_beta);
    Ok(QuantileFit {
        tau,
        lambda,
        coefficients: best_beta,
        objective: loss + pen,
        check_loss: loss,
        penalty: pen,
        iterations,
        certified: loss + pen == 0.0,
        interpolated: 0,
    })
}

/// Ridge used in every linear solve: relative 1e-10 when the penalty is off
/// (this pins down directions the design cannot see, such as the shared
/// constant of two concatenated bases), 1e-13 otherwise.
fn ridge(a: &DMatrix<f64>, lambda: f64) -> f64 {
    let p = a.nrows();
    let tr = (0..p).map(|j| a[(j, j)]).sum::<f64>() / p as f64;
    let base = if tr > 0.0 { tr } else { 1.0 };
    base * if lambda == 0.0 { 1e-10 } else { 1e-13 }
}

fn solve_ridged(mut a: DMatrix<f64>, penalty: &DMatrix<f64>, lambda: f64, b: &DVector<f64>) -> Option<Vec<f64>> {
    if lambda > 0.0 {
        a += penalty * lambda;
    }
    let d = ridge(&a, lambda);
    for j in 0..a.nrows() {
        a[(j, j)] += d;
    }
    spd_solve(a, b).map(|x| x.as_slice().to_vec())
}

/// Degenerate exact-fit case: when the data can be interpolated the optimum
/// is zero, typically with far more zero residuals than coefficients, and
/// the active-set method can cycle. Interpolate the observations with the
/// smallest residuals (greedily keeping linearly independent rows) and
/// accept the result if it attains zero up to rounding; zero is a lower
/// bound, so that certifies it.
fn zero_vertex(prob: &Problem<'_>, beta0: &[f64], iterations: usize) -> Option<QuantileFit> {
    let d = prob.design;
    let y = prob.y;
    let (n, p) = (y.len(), d.n_cols());
    let fits = d.row_fits(beta0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| (y[a] - fits[d.obs_row[a]]).abs().total_cmp(&(y[b] - fits[d.obs_row[b]]).abs()));
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut chosen = Vec::new();
    for &i in &idx {
        if basis.len() == p {
            break;
        }
        let x = DVector::from_row_slice(d.row(d.obs_row[i]));
        let mut v = x.clone();
        for q in &basis {
            v -= q * q.dot(&v);
        }
        if v.norm() > 1e-8 * x.norm().max(f64::MIN_POSITIVE) {
            basis.push(v.normalize());
            chosen.push(i);
        }
    }
    let k = chosen.len();
    let xe = DMatrix::from_fn(k, p, |a, j| d.row(d.obs_row[chosen[a]])[j]);
    let ye = DVector::from_iterator(k, chosen.iter().map(|&i| y[i]));
    let beta: Vec<f64> = xe.svd(true, true).solve(&ye, 1e-12).ok()?.iter().copied().collect();
    let (loss, pen) = objective(d, y, prob.tau, prob.lambda, prob.penalty, &beta);
    let bound = 1e-12 * n as f64 * prob.scale;
    (loss + pen <= bound).then(|| QuantileFit {
        tau: prob.tau,
        lambda: prob.lambda,
        coefficients: beta,
        objective: loss + pen,
        check_loss: loss,
        penalty: pen,
        iterations,
        certified: true,
        interpolated: k,
    })
}

/// Last resort when the active-set method cycles at a degenerate vertex:
/// solve the problem as a QP with an interior-point solver (response scaled
/// to unit spread), then try the active-set polish once more from there.
/// An interior-point solution that beats `beta0` is returned uncertified.
fn conic_finish(prob: &Problem<'_>, beta0: &[f64], iterations: usize) -> Option<QuantileFit> {
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, ZeroConeT};

    let d = prob.design;
    let (n, p) = (prob.y.len(), d.n_cols());
    let s = prob.scale;
    let nv = p + 2 * n;
    // Variables (b, u, v): X b + u - v = y / s with u, v >= 0.
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..p {
        for i in 0..=j {
            let v = prob.lambda * prob.penalty[(i, j)] * s;
            if v != 0.0 {
                pi.push(i);
                pj.push(j);
                pv.push(v);
            }
        }
    }
    let hess = CscMatrix::new_from_triplets(nv, nv, pi, pj, pv);
    let mut q = vec![0.0; nv];
    q[p..p + n].iter_mut().for_each(|v| *v = prob.tau);
    q[p + n..].iter_mut().for_each(|v| *v = 1.0 - prob.tau);
    let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        for (j, &x) in d.row(d.obs_row[i]).iter().enumerate() {
            if x != 0.0 {
                ai.push(i);
                aj.push(j);
                av.push(x);
            }
        }
        ai.extend([i, i, n + i, 2 * n + i]);
        aj.extend([p + i, p + n + i, p + i, p + n + i]);
        av.extend([1.0, -1.0, -1.0, -1.0]);
    }
    let a = CscMatrix::new_from_triplets(3 * n, nv, ai, aj, av);
    let mut b = vec![0.0; 3 * n];
    for i in 0..n {
        b[i] = prob.y[i] / s;
    }
    let cones = [ZeroConeT(n), NonnegativeConeT(2 * n)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-11)
        .tol_gap_rel(1e-11)
        .tol_feas(1e-11)
        .max_iter(200)
        .build()
        .ok()?;
    let mut solver = DefaultSolver::new(&hess, &q, &a, &b, &cones, settings).ok()?;
    solver.solve();
    if !matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return None;
    }
    let beta: Vec<f64> = solver.solution.x[..p].iter().map(|v| v * s).collect();
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(f) = active_set(prob, &beta, iterations) {
        return Some(f);
    }
    let (loss, pen) = objective(d, prob.y, prob.tau, prob.lambda, prob.penalty, &beta);
    let (l0, p0) = objective(d, prob.y, prob.tau, prob.lambda, prob.penalty, beta0);
    (loss + pen <= l0 + p0).then(|| QuantileFit {
        tau: prob.tau,
        lambda: prob.lambda,
        coefficients: beta,
        objective: loss + pen,
        check_loss: loss,
        penalty: pen,
        iterations,
        certified: false,
        interpolated: 0,
    })
}

/// Observations forced to zero residual together: same design row, same
/// response.
struct TieClass {
    row: usize,
    y: f64,
    members: Vec<usize>,
}

/// Exact finisher: a primal active-set method started at `beta0`.
///
/// Each step fixes the residual signs of the free observations and the set
/// of zero-residual classes, minimizes the resulting quadratic subject to the
/// zero-residual constraints, and moves toward that minimizer until the
/// first free residual hits zero (that observation then joins the zero
/// set). Classes whose multipliers leave their subgradient range are
/// released. Reaching the sub-problem minimizer with feasible multipliers
/// means the optimality conditions hold, which certifies the solution.
fn active_set(prob: &Problem<'_>, beta0: &[f64], iterations: usize) -> Option<QuantileFit> {
    let d = prob.design;
    let (y, tau) = (prob.y, prob.tau);
    let (n, p, g) = (y.len(), d.n_cols(), d.n_rows());
    let counts: Vec<f64> = d.group_size.iter().map(|&c| c as f64).collect();
    let mut hess = prob.penalty * prob.lambda;
    // Only needs to pin down directions the design cannot see; any bias it
    // adds to the objective is of order 1e-14 relative.
    let delta = {
        let xtx = d.weighted_gram(&counts) + &hess;
        let tr = (0..p).map(|j| xtx[(j, j)]).sum::<f64>() / p as f64;
        1e-14 * if tr > 0.0 { tr } else { 1.0 }
    };
    for j in 0..p {
        hess[(j, j)] += delta;
    }
    let tol_mu = 1e-9;

    let mut beta = beta0.to_vec();
    let mut fits = d.row_fits(&beta);
    let mut res: Vec<f64> = (0..n).map(|i| y[i] - fits[d.obs_row[i]]).collect();
    let mut positive: Vec<bool> = res.iter().map(|&r| r >= 0.0).collect();
    let mut in_zero = vec![false; n];
    let mut classes: Vec<TieClass> = Vec::new();
    let sub = |pos: bool| if pos { tau } else { tau - 1.0 };

    for _ in 0..(20 * p + 100) {
        let k = classes.len();
        let mut gsum = vec![0.0; g];
        for i in 0..n {
            if !in_zero[i] {
                gsum[d.obs_row[i]] += sub(positive[i]);
            }
        }
        let top = d.weighted_sum(&gsum);
        let dim = p + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (p, p)).copy_from(&hess);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, p).copy_from(&top);
        for (c, cls) in classes.iter().enumerate() {
            let x = d.row(cls.row);
            for j in 0..p {
                kkt[(j, p + c)] = -x[j];
                kkt[(p + c, j)] = x[j];
            }
            rhs[p + c] = cls.y;
        }
        let sol = kkt.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
        let Some(sol) = sol else {
            // The newest class is linearly dependent on the others: let its
            // members cross to the other side instead.
            let cls = classes.pop()?;
            for i in cls.members {
                in_zero[i] = false;
                positive[i] = !positive[i];
            }
            continue;
        };

        // Release the class with the worst multiplier violation, if any.
        let mut worst: Option<(usize, f64, bool)> = None;
        for (c, cls) in classes.iter().enumerate() {
            let m = cls.members.len() as f64;
            let mu = sol[p + c];
            let (lo, hi) = (m * (tau - 1.0), m * tau);
            let (viol, pos) = if mu > hi + tol_mu * m {
                (mu - hi, true)
            } else if mu < lo - tol_mu * m {
                (lo - mu, false)
            } else {
                continue;
            };
            if worst.is_none_or(|(_, v, _)| viol > v) {
                worst = Some((c, viol, pos));
            }
        }
        if let Some((c, _, pos)) = worst {
            let cls = classes.swap_remove(c);
            for i in cls.members {
                in_zero[i] = false;
                positive[i] = pos;
            }
            continue;
        }

        let target: Vec<f64> = sol.rows(0, p).iter().copied().collect();
        let dir: Vec<f64> = target.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let slope = d.row_fits(&dir);
        let mut t_min = 1.0;
        let mut hit = None;
        for i in 0..n {
            if in_zero[i] {
                continue;
            }
            let a = slope[d.obs_row[i]];
            let crossing = if positive[i] { a > 0.0 } else { a < 0.0 };
            if crossing {
                let t = (res[i] / a).max(0.0);
                if t < t_min {
                    t_min = t;
                    hit = Some(i);
                }
            }
        }
        if hit.is_none() {
            beta = target;
        } else {
            for (b, s) in beta.iter_mut().zip(&dir) {
                *b += t_min * s;
            }
        }
        fits = d.row_fits(&beta);
        for i in 0..n {
            res[i] = if in_zero[i] { 0.0 } else { y[i] - fits[d.obs_row[i]] };
        }
        match hit {
            None => {
                let (loss, pen) = objective(d, y, tau, prob.lambda, prob.penalty, &beta);
                let interpolated = classes.iter().map(|c| c.members.len()).sum();
                return Some(QuantileFit {
                    tau,
                    lambda: prob.lambda,
                    coefficients: beta,
                    objective: loss + pen,
                    check_loss: loss,
                    penalty: pen,
                    iterations,
                    certified: true,
                    interpolated,
                });
            }
            Some(i) => {
                let row = d.obs_row[i];
                let members: Vec<usize> =
                    (0..n).filter(|&j| !in_zero[j] && d.obs_row[j] == row && y[j] == y[i]).collect();
                for &j in &members {
                    in_zero[j] = true;
                    res[j] = 0.0;
                }
                classes.push(TieClass { row, y: y[i], members });
            }
        }
    }
    None
}

/// Generalized approximate cross-validation score of one fit:
/// `sum rho / (n - tr H)` with `H = X (X'WX + lambda P)^{-1} X'W`.
/// Returns `(check loss, tr H, score)`; the score is `None` when
/// `n - tr H <= 0`.
pub fn gacv_score(design: &Design, y: &[f64], fit: &QuantileFit, penalty: &DMatrix<f64>) -> Result<(f64, f64, Option<f64>), FitError> {
    let n = y.len();
    let fits = design.row_fits(&fit.coefficients);
    let floor = 1e-8 * response_scale(y);
    let mut w = vec![0.0; design.n_rows()];
    let mut loss = 0.0;
    for i in 0..n {
        let g = design.obs_row[i];
        let r = y[i] - fits[g];
        loss += rho(r, fit.tau);
        w[g] += 0.5 / r.abs().max(floor);
    }
    let xwx = design.weighted_gram(&w);
    let trace = hat_trace(&xwx, penalty, fit.lambda).ok_or(FitError::Singular { context: "GACV hat matrix" })?;
    let denom = n as f64 - trace;
    Ok((loss, trace, (denom > 0.0).then(|| loss / denom)))
}

/// `tr((G + lambda P)^{-1} G)` for a Gram matrix `G`.
pub fn hat_trace(gram: &DMatrix<f64>, penalty: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    let mut a = gram.clone();
    if lambda > 0.0 {
        a += penalty * lambda;
    }
    let d = ridge(&a, lambda);
    for j in 0..a.nrows() {
        a[(j, j)] += d;
    }
    let chol = a.cholesky()?;
    let z = chol.solve(gram);
    let t = z.trace();
    t.is_finite().then_some(t)
}

/// Outcome of a GACV search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GacvSelection {
    pub lambda: f64,
    /// Aggregated criterion per grid point (`None` where undefined).
    pub criteria: Vec<Option<f64>>,
    /// Fits at the selected lambda, one per tau in the selection set.
    pub fits: Vec<QuantileFit>,
}

/// Select lambda from `grid` by minimizing the GACV criterion summed over
/// `taus`. Ties go to the larger lambda. Grid points where the criterion is
/// undefined for any tau are skipped and logged.
pub fn gacv_select(
    design: &Design,
    y: &[f64],
    taus: &[f64],
    penalty: &DMatrix<f64>,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<GacvSelection, FitError> {
    if grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(FitError::UnsortedGrid);
    }
    if taus.is_empty() {
        return Err(FitError::Dimension("empty tau selection set".into()));
    }
    let mut criteria = vec![None; grid.len()];
    let mut best: Option<(usize, f64, Vec<QuantileFit>)> = None;
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; taus.len()];
    let mut skipped = Vec::new();
    for li in (0..grid.len()).rev() {
        let lambda = grid[li];
        let mut total = 0.0;
        let mut defined = true;
        let mut fits = Vec::with_capacity(taus.len());
        for (ti, &tau) in taus.iter().enumerate() {
            let fit = match fit_pqr_from(design, y, tau, lambda, penalty, warm[ti].as_deref(), opts) {
                Ok(f) => f,
                Err(e @ FitError::NonConvergence { .. }) => {
                    // A grid point without a converged fit has no criterion value.
                    warn!("GACV point lambda = {lambda} dropped: {e}");
                    defined = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            warm[ti] = Some(fit.coefficients.clone());
            match gacv_score(design, y, &fit, penalty)?.2 {
                Some(s) if s.is_finite() => total += s,
                _ => defined = false,
            }
            fits.push(fit);
        }
        if !defined {
            skipped.push(lambda);
            continue;
        }
        criteria[li] = Some(total);
        if best.as_ref().is_none_or(|(_, c, _)| total < *c) {
            best = Some((li, total, fits));
        }
    }
    if !skipped.is_empty() {
        warn!("GACV undefined at lambda = {skipped:?}; skipped");
    }
    let (li, _, fits) = best.ok_or(FitError::GacvDegenerate(skipped))?;
    Ok(GacvSelection { lambda: grid[li], criteria, fits })
}
