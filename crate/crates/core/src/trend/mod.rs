//! Penalized B-spline trends on time, trend draws, stock normalization and
//! re-basing to a reference year.
//!
//! The smoothing objective is `sum (v_i - B(t_i)'b)^2 + (lambda/2) b'D'Db`,
//! so the normal equations are `(X'X + (lambda/2) D'D) b = X'v`.

mod data;
mod loess;

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::bspline::{BSplineBasis, BasisError, DifferenceMatrix, KnotPlacement};
use crate::linalg::{default_lambda_grid, sym_pinv};
use crate::rng::std_normal;

pub use data::{MarketSeries, YieldPanel, YieldRecord};
pub use loess::loess_smooth;

#[derive(Debug, Error, PartialEq)]
pub enum TrendError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("invalid trend input: {0}")]
    Invalid(String),
    #[error("need at least 2 distinct times, got {0}")]
    TooFewTimes(usize),
    #[error("normal equations are singular at lambda = {0}")]
    Singular(f64),
    #[error("no admissible smoothing parameter on the grid")]
    NoAdmissibleLambda,
    #[error("cannot take the log of non-positive value {0}")]
    NonPositive(f64),
    #[error("trend variance is not finite at t = {0}")]
    NonFiniteVariance(f64),
    #[error("loess window at {at} holds only {points} weighted points")]
    EmptyWindow { at: f64, points: usize },
    #[error("no value for year {0}")]
    MissingYear(i32),
    #[error("smoothed production {value} for year {year} is not positive")]
    NonPositiveSmooth { year: i32, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendOptions {
    pub knot_spacing: f64,
    pub degree: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub placement: KnotPlacement,
}

impl Default for TrendOptions {
    fn default() -> Self {
        Self {
            knot_spacing: 10.0,
            degree: 3,
            penalty_order: 2,
            lambda_grid: default_lambda_grid(),
            placement: KnotPlacement::EquallySpaced,
        }
    }
}

/// Fitted penalized-LS spline in one covariate.
#[derive(Debug, Clone)]
pub struct TrendModel {
    basis: BSplineBasis,
    coefficients: Vec<f64>,
    lambda: f64,
    sigma2: f64,
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    sample_count: usize,
    criteria: Vec<Option<f64>>,
}

impl TrendModel {
    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Residual variance sigma^2-hat.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// G-hat, the mean of B(t)B(t)' over the distinct covariate values.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Observation count n in the draw variance sigma^2/n.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// GACV value per grid point (None where undefined).
    pub fn criteria(&self) -> &[Option<f64>] {
        &self.criteria
    }

    pub fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2;
    }

    /// Replace G-hat by the mean of B(x)B(x)' over every value in `x`
    /// (repeats included).
    pub fn set_gram_from(&mut self, x: &[f64]) -> Result<(), TrendError> {
        if x.is_empty() {
            return Err(TrendError::Invalid("empty covariate list".into()));
        }
        let p = self.basis.dim();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for &v in x {
            let b = DVector::from_vec(self.basis.eval(v)?);
            gram += &b * b.transpose();
        }
        gram /= x.len() as f64;
        let (inv, dropped) = sym_pinv(&gram, 1e-12);
        if dropped {
            warn!("Gram matrix is singular; using its pseudo-inverse for draws");
        }
        self.gram = gram;
        self.gram_inv = inv;
        Ok(())
    }

    /// Fitted trend; linear continuation of the spline outside the support.
    pub fn predict(&self, t: f64) -> Result<f64, TrendError> {
        let (lo, hi) = self.basis.support();
        if !t.is_finite() {
            return Err(BasisError::NonFinite.into());
        }
        if t < lo || t > hi {
            let edge = t.clamp(lo, hi);
            let (v, s) = self.basis.spline_value_and_slope(&self.coefficients, edge)?;
            return Ok(v + s * (t - edge));
        }
        let b = self.basis.eval(t)?;
        Ok(dot(&b, &self.coefficients))
    }

    /// Draw variance (sigma^2/n) B(t)' G^-1 B(t). Beyond the support the
    /// boundary value is used.
    pub fn draw_variance(&self, t: f64) -> Result<f64, TrendError> {
        let b = DVector::from_vec(self.basis.eval_clamped(t)?);
        let q = (b.transpose() * &self.gram_inv * &b)[(0, 0)];
        let v = self.sigma2 / self.sample_count as f64 * q;
        if !v.is_finite() {
            return Err(TrendError::NonFiniteVariance(t));
        }
        Ok(v.max(0.0))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Penalized LS of `values` on `basis(x)`, lambda chosen by least-squares
/// GACV `RSS / (n - tr H)` over `grid` (ties go to the larger lambda).
/// sigma^2 is RSS/(n - 1).
pub fn fit_penalized(
    basis: BSplineBasis,
    x: &[f64],
    values: &[f64],
    penalty_order: usize,
    grid: &[f64],
) -> Result<TrendModel, TrendError> {
    let n = x.len();
    if n != values.len() {
        return Err(TrendError::Invalid(format!("{n} times but {} values", values.len())));
    }
    if grid.is_empty() {
        return Err(TrendError::Invalid("empty lambda grid".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(TrendError::Invalid(format!("lambda must be finite and non-negative, got {l}")));
    }
    if x.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(TrendError::Invalid("non-finite time or value".into()));
    }
    // Group by distinct covariate value: (x, count, sum, within-group SS).
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut groups: Vec<(f64, usize, f64, f64)> = Vec::new();
    for i in idx {
        let v = values[i];
        match groups.last_mut() {
            Some(g) if g.0 == x[i] => {
                let old_mean = g.2 / g.1 as f64;
                g.1 += 1;
                g.2 += v;
                g.3 += (v - old_mean) * (v - g.2 / g.1 as f64);
            }
            _ => groups.push((x[i], 1, v, 0.0)),
        }
    }
    if groups.len() < 2 {
        return Err(TrendError::TooFewTimes(groups.len()));
    }
    let p = basis.dim();
    let g = groups.len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    // Weighted group rows sqrt(n_g) B(t_g) with targets sqrt(n_g) * group mean.
    let mut xw = DMatrix::<f64>::zeros(g, p);
    let mut yw = DVector::<f64>::zeros(g);
    let mut within = 0.0;
    for (r, &(t, cnt, sum, ss)) in groups.iter().enumerate() {
        let b = DVector::from_vec(basis.eval(t)?);
        gram += &b * b.transpose();
        let w = (cnt as f64).sqrt();
        xw.row_mut(r).copy_from(&(b.transpose() * w));
        yw[r] = w * sum / cnt as f64;
        within += ss;
    }
    gram /= g as f64;
    let diff = DifferenceMatrix::new(penalty_order, p)?;
    let d = diff.entries();

    let mut best: Option<(f64, f64, DVector<f64>, f64)> = None;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut crit_by_index = vec![None; grid.len()];
    let mut singular_at = None;
    for &gi in &order {
        let lambda = grid[gi];
        // QR of [Xw; sqrt(lambda/2) D] avoids squaring the condition number.
        let mut aug = DMatrix::<f64>::zeros(g + d.nrows(), p);
        aug.rows_mut(0, g).copy_from(&xw);
        aug.rows_mut(g, d.nrows()).copy_from(&(d * (lambda / 2.0).sqrt()));
        let mut rhs = DVector::<f64>::zeros(g + d.nrows());
        rhs.rows_mut(0, g).copy_from(&yw);
        let qr = aug.qr();
        let r = qr.r();
        let rmax = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * rmax) {
            singular_at.get_or_insert(lambda);
            continue;
        }
        let q = qr.q();
        let qty = q.transpose() * &rhs;
        let Some(beta) = r.solve_upper_triangular(&qty) else {
            singular_at.get_or_insert(lambda);
            continue;
        };
        if beta.iter().any(|v| !v.is_finite()) {
            singular_at.get_or_insert(lambda);
            continue;
        }
        let fit_resid = &yw - &xw * &beta;
        let rss = within + fit_resid.norm_squared();
        // tr H = ||Q_top||_F^2.
        let trace = q.rows(0, g).norm_squared();
        let denom = n as f64 - trace;
        let crit = (denom > 0.0).then(|| rss / denom);
        if crit.is_none() {
            warn!("trend GACV undefined at lambda = {lambda} (n - tr H = {denom})");
        }
        crit_by_index[gi] = crit;
        let score = crit.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((_, s, _, _)) => score < *s,
        };
        if better && (crit.is_some() || best.is_none()) {
            best = Some((lambda, score, beta, rss));
        }
    }
    let criteria = crit_by_index;
    let (lambda, _, beta, rss) = match best {
        Some(b) => b,
        None => return Err(TrendError::Singular(singular_at.unwrap_or(grid[0]))),
    };
    if criteria.iter().all(|c| c.is_none()) && grid.len() > 1 {
        return Err(TrendError::NoAdmissibleLambda);
    }
    let sigma2 = if n > 1 { rss / (n as f64 - 1.0) } else { 0.0 };
    let (gram_inv, dropped) = sym_pinv(&gram, 1e-12);
    if dropped {
        warn!("trend Gram matrix is singular; using its pseudo-inverse for draws");
    }
    Ok(TrendModel {
        basis,
        coefficients: beta.iter().copied().collect(),
        lambda,
        sigma2,
        gram,
        gram_inv,
        sample_count: n,
        criteria,
    })
}

/// Trend in time with `ceil(T / spacing)` equally spaced interior intervals
/// on `[0, T]`, T the largest time index.
pub fn fit_trend(times: &[f64], values: &[f64], opts: &TrendOptions) -> Result<TrendModel, TrendError> {
    if times.is_empty() {
        return Err(TrendError::TooFewTimes(0));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(TrendError::Invalid(format!("time indices must be non-negative, got {t}")));
    }
    if !(opts.knot_spacing > 0.0) {
        return Err(TrendError::Invalid(format!("knot spacing must be positive, got {}", opts.knot_spacing)));
    }
    let t_max = times.iter().fold(0.0_f64, |m, t| m.max(*t));
    if t_max <= 0.0 {
        return Err(TrendError::TooFewTimes(1));
    }
    let k_n = ((t_max / opts.knot_spacing).ceil() as usize).max(1);
    let basis = BSplineBasis::new(times, k_n, opts.degree, (0.0, t_max), opts.placement)?;
    fit_penalized(basis, times, values, opts.penalty_order, &opts.lambda_grid)
}

/// Yield trends fitted separately for each state, keyed by state.
pub fn fit_state_trends(
    panel: &YieldPanel,
    first_year: i32,
    opts: &TrendOptions,
) -> Result<BTreeMap<String, TrendModel>, TrendError> {
    use rayon::prelude::*;
    let states = panel.states();
    let fits: Vec<_> = states
        .par_iter()
        .map(|s| {
            let sub = panel.for_state(s);
            let t: Vec<f64> = sub.records().iter().map(|r| year_index(r.year, first_year)).collect();
            let v: Vec<f64> = sub.records().iter().map(|r| r.value).collect();
            fit_trend(&t, &v, opts).map(|m| (s.clone(), m))
        })
        .collect();
    fits.into_iter().collect()
}

/// Time index t with the first year mapped to 1.
pub fn year_index(year: i32, first_year: i32) -> f64 {
    f64::from(year - first_year + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetrendMode {
    /// `log(x) - trend`.
    LogPrice,
    /// `x - trend`.
    LevelYield,
}

pub fn detrend_value(x: f64, trend: f64, mode: DetrendMode) -> Result<f64, TrendError> {
    match mode {
        DetrendMode::LogPrice if x <= 0.0 || x.is_nan() => Err(TrendError::NonPositive(x)),
        DetrendMode::LogPrice => Ok(x.ln() - trend),
        DetrendMode::LevelYield => Ok(x - trend),
    }
}

pub fn retrend_value(d: f64, trend: f64, mode: DetrendMode) -> f64 {
    match mode {
        DetrendMode::LogPrice => (trend + d).exp(),
        DetrendMode::LevelYield => trend + d,
    }
}

/// Detrend `values` observed at `times` against `model`.
pub fn detrend(values: &[f64], times: &[f64], model: &TrendModel, mode: DetrendMode) -> Result<Vec<f64>, TrendError> {
    if values.len() != times.len() {
        return Err(TrendError::Invalid(format!("{} values but {} times", values.len(), times.len())));
    }
    values
        .iter()
        .zip(times)
        .map(|(&v, &t)| detrend_value(v, model.predict(t)?, mode))
        .collect()
}

pub fn retrend(detrended: &[f64], times: &[f64], model: &TrendModel, mode: DetrendMode) -> Result<Vec<f64>, TrendError> {
    if detrended.len() != times.len() {
        return Err(TrendError::Invalid(format!("{} values but {} times", detrended.len(), times.len())));
    }
    detrended
        .iter()
        .zip(times)
        .map(|(&d, &t)| Ok(retrend_value(d, model.predict(t)?, mode)))
        .collect()
}

/// One draw from N(B(t)'b, (sigma^2/n) B(t)' G^-1 B(t)).
pub fn draw_trend<R: Rng + ?Sized>(model: &TrendModel, t: f64, rng: &mut R) -> Result<f64, TrendError> {
    let mean = model.predict(t)?;
    let var = model.draw_variance(t)?;
    let z = std_normal(rng);
    Ok(if var == 0.0 { mean } else { mean + var.sqrt() * z })
}

/// Stocks divided by the LOESS-smoothed production of the previous year.
/// The first year uses the smoothed value at its own year.
pub fn normalize_stocks(series: &MarketSeries, span: f64) -> Result<Vec<f64>, TrendError> {
    let x: Vec<f64> = series.years.iter().map(|&y| f64::from(y)).collect();
    let smooth = loess_smooth(&x, &series.national_production, &x, span, 1)?;
    (0..series.len())
        .map(|i| {
            let (year, sm) = if i == 0 {
                (series.years[0], smooth[0])
            } else {
                let prev = series.years[i] - 1;
                if series.years[i - 1] != prev {
                    return Err(TrendError::MissingYear(prev));
                }
                (prev, smooth[i - 1])
            };
            if !(sm > 0.0) {
                return Err(TrendError::NonPositiveSmooth { year, value: sm });
            }
            Ok(series.stocks[i] / sm)
        })
        .collect()
}

/// Production from per-acre yield and harvested acreage.
pub fn production_from_yield(yield_per_acre: &[f64], acres: &[f64]) -> Vec<f64> {
    yield_per_acre.iter().zip(acres).map(|(y, a)| y * a).collect()
}

/// GDP deflator by year, normalized to 1 in the base year when that year is
/// present.
#[derive(Debug, Clone, PartialEq)]
pub struct Deflator {
    values: BTreeMap<i32, f64>,
}

impl Deflator {
    pub fn new(years: &[i32], values: &[f64], base_year: i32) -> Result<Self, TrendError> {
        if years.len() != values.len() {
            return Err(TrendError::Invalid("deflator years and values differ in length".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(TrendError::Invalid(format!("deflator must be positive, got {v}")));
        }
        let mut map: BTreeMap<i32, f64> = years.iter().copied().zip(values.iter().copied()).collect();
        if let Some(&b) = map.get(&base_year) {
            map.values_mut().for_each(|v| *v /= b);
        } else {
            warn!("deflator has no entry for base year {base_year}; values used as supplied");
        }
        Ok(Self { values: map })
    }

    pub fn get(&self, year: i32) -> Result<f64, TrendError> {
        self.values.get(&year).copied().ok_or(TrendError::MissingYear(year))
    }
}

/// `p / GDPDEF_t`.
pub fn rebase_price(p: f64, deflator: f64) -> f64 {
    p / deflator
}

/// `y + trend(a) - trend(t)`.
pub fn rebase_yield(y: f64, trend_t: f64, trend_base: f64) -> f64 {
    y + (trend_base - trend_t)
}

/// Price and yield of year `year` (time index `t`) expressed in base-year
/// units (time index `t_base`).
pub fn rebase_to_year(
    p: f64,
    y: f64,
    yield_trend: &TrendModel,
    t: f64,
    t_base: f64,
    deflator: &Deflator,
    year: i32,
) -> Result<(f64, f64), TrendError> {
    let d = deflator.get(year)?;
    Ok((rebase_price(p, d), rebase_yield(y, yield_trend.predict(t)?, yield_trend.predict(t_base)?)))
}
