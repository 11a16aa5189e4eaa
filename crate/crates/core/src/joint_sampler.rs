//! Conditional quantile models for detrended price given stocks and yield
//! given price and stocks, and inverse-transform joint sampling.
//!
//! Quantile curves are fitted on a fixed tau grid. At each covariate point
//! the grid values are sorted (monotone rearrangement) and interpolated
//! linearly in tau, with linear continuation from the end segments for tau
//! outside the grid.

use log::{debug, warn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{block_penalty, BSplineBasis, KnotPlacement};
use crate::linalg::default_lambda_grid;
use crate::quantile_fit::{fit_pqr_from, gacv_select, Design, QuantileFit, SolverOptions};
use crate::rng::named_stream;
use crate::trend::{draw_trend, Deflator, TrendModel};
use crate::{Error, Result};

const BLOCK: usize = 1024;

/// Detrended data: one price and stocks value per year and the county
/// yields with the index of their year.
#[derive(Debug, Clone, PartialEq)]
pub struct DetrendedPanel {
    pub years: Vec<i32>,
    pub price: Vec<f64>,
    pub stocks: Vec<f64>,
    pub obs_year: Vec<usize>,
    pub yields: Vec<f64>,
}

impl DetrendedPanel {
    pub fn new(years: Vec<i32>, price: Vec<f64>, stocks: Vec<f64>, obs_year: Vec<usize>, yields: Vec<f64>) -> Result<Self> {
        let t = years.len();
        if price.len() != t || stocks.len() != t {
            return Err(Error::InvalidInput(format!(
                "{t} years but {} prices and {} stocks values",
                price.len(),
                stocks.len()
            )));
        }
        if obs_year.len() != yields.len() {
            return Err(Error::InvalidInput("yield values and year indices differ in length".into()));
        }
        if let Some(i) = obs_year.iter().find(|&&i| i >= t) {
            return Err(Error::InvalidInput(format!("yield refers to year index {i} of {t}")));
        }
        if price.iter().chain(&stocks).chain(&yields).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite detrended value".into()));
        }
        Ok(Self { years, price, stocks, obs_year, yields })
    }

    pub fn year_count(&self) -> usize {
        self.years.len()
    }

    /// Panel restricted to the yield records `keep`. A year keeps its price
    /// and stocks values while at least one of its records remains.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut new_index = vec![usize::MAX; self.years.len()];
        let (mut years, mut price, mut stocks) = (Vec::new(), Vec::new(), Vec::new());
        let mut order: Vec<usize> = keep.iter().map(|&i| self.obs_year[i]).collect();
        order.sort_unstable();
        order.dedup();
        for t in order {
            new_index[t] = years.len();
            years.push(self.years[t]);
            price.push(self.price[t]);
            stocks.push(self.stocks[t]);
        }
        let obs_year = keep.iter().map(|&i| new_index[self.obs_year[i]]).collect();
        let yields = keep.iter().map(|&i| self.yields[i]).collect();
        Self::new(years, price, stocks, obs_year, yields)
    }
}

/// How the covariate supports are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SupportMode {
    /// Observed range widened by `expand` times its width on each side.
    Empirical { expand: f64 },
    /// Fixed intervals; covariates outside are clamped and counted.
    Fixed { price: (f64, f64), stocks: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub tau_grid: Vec<f64>,
    /// Quantile levels whose GACV values are summed to pick lambda.
    pub gacv_taus: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// Fixed smoothing parameters that bypass GACV when set.
    pub lambda_price: Option<f64>,
    pub lambda_yield: Option<f64>,
    pub interior_knots: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub placement: KnotPlacement,
    pub supports: SupportMode,
    pub tau_clamp: (f64, f64),
    pub rearrange: bool,
    pub solver: SolverOptions,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau_grid: (1..=99).map(|k| f64::from(k) / 100.0).collect(),
            gacv_taus: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            lambda_grid: default_lambda_grid(),
            lambda_price: None,
            lambda_yield: None,
            interior_knots: 4,
            degree: 3,
            penalty_order: 2,
            placement: KnotPlacement::Quantile,
            supports: SupportMode::Empirical { expand: 0.05 },
            tau_clamp: (0.001, 0.999),
            rearrange: true,
            solver: SolverOptions::default(),
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        let g = &self.tau_grid;
        if g.len() < 2 || g.windows(2).any(|w| w[1] <= w[0]) || g.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput("tau grid must hold at least two increasing values in (0, 1)".into()));
        }
        let (lo, hi) = self.tau_clamp;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::InvalidInput(format!("invalid tau clamp [{lo}, {hi}]")));
        }
        if self.interior_knots == 0 {
            return Err(Error::InvalidInput("interior knot count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Price quantile curves: spline in stocks, or scalar sample quantiles.
#[derive(Debug, Clone)]
pub enum PriceQuantiles {
    Conditional { basis: BSplineBasis, fits: Vec<QuantileFit>, lambda: f64 },
    Unconditional { values: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ConditionalJointModel {
    pub tau_grid: Vec<f64>,
    pub price: PriceQuantiles,
    pub yield_price_basis: BSplineBasis,
    /// Absent in the unconditional model.
    pub yield_stock_basis: Option<BSplineBasis>,
    pub yield_fits: Vec<QuantileFit>,
    pub yield_lambda: f64,
    pub price_support: (f64, f64),
    pub stock_support: (f64, f64),
    pub tau_clamp: (f64, f64),
    pub rearrange: bool,
    /// Covariate values clamped into the supports while fitting.
    pub fit_clamps: usize,
}

/// Draws of (detrended price, detrended yield) and, once completed, the
/// retrended and re-based pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDraws {
    pub stocks: Option<f64>,
    pub seed: u64,
    pub tau_price: Vec<f64>,
    pub tau_yield: Vec<f64>,
    pub price: Vec<f64>,
    pub yields: Vec<f64>,
    /// Draws whose price had to be clamped into the price support before
    /// evaluating the yield quantiles.
    pub price_clamps: usize,
    pub price_level: Vec<f64>,
    pub yield_level: Vec<f64>,
}

impl JointDraws {
    pub fn len(&self) -> usize {
        self.price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.price.is_empty()
    }

    pub fn clamp_fraction(&self) -> f64 {
        self.price_clamps as f64 / self.len().max(1) as f64
    }
}

fn support_from(values: &[f64], mode_fixed: Option<(f64, f64)>, expand: f64) -> Result<(f64, f64)> {
    if let Some(s) = mode_fixed {
        if !(s.0 < s.1) {
            return Err(Error::InvalidInput(format!("empty support [{}, {}]", s.0, s.1)));
        }
        return Ok(s);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = hi - lo;
    if !(w > 0.0) {
        // Constant covariate: a unit-width interval around it.
        return Ok((lo - 0.5, hi + 0.5));
    }
    Ok((lo - expand * w, hi + expand * w))
}

/// Price and stocks supports that `mode` resolves to on `panel`.
pub fn supports(panel: &DetrendedPanel, mode: SupportMode) -> Result<((f64, f64), (f64, f64))> {
    match mode {
        SupportMode::Empirical { expand } => {
            Ok((support_from(&panel.price, None, expand)?, support_from(&panel.stocks, None, expand)?))
        }
        SupportMode::Fixed { price, stocks } => {
            Ok((support_from(&panel.price, Some(price), 0.0)?, support_from(&panel.stocks, Some(stocks), 0.0)?))
        }
    }
}

fn clamp_count(values: &[f64], s: (f64, f64)) -> (Vec<f64>, usize) {
    let mut n = 0;
    let out = values
        .iter()
        .map(|&v| {
            if v < s.0 || v > s.1 {
                n += 1;
            }
            v.clamp(s.0, s.1)
        })
        .collect();
    (out, n)
}

/// Fits every tau on the grid at one lambda, walking outward from the
/// median with warm starts.
fn fit_tau_grid(
    design: &Design,
    y: &[f64],
    taus: &[f64],
    lambda: f64,
    penalty: &nalgebra::DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<Vec<QuantileFit>> {
    let mid = taus.iter().position(|t| *t >= 0.5).unwrap_or(taus.len() / 2);
    let mut out: Vec<Option<QuantileFit>> = vec![None; taus.len()];
    let mut warm: Option<Vec<f64>> = None;
    for i in mid..taus.len() {
        let f = fit_pqr_from(design, y, taus[i], lambda, penalty, warm.as_deref(), opts)?;
        warm = Some(f.coefficients.clone());
        out[i] = Some(f);
    }
    warm = out[mid].as_ref().map(|f| f.coefficients.clone());
    for i in (0..mid).rev() {
        let f = fit_pqr_from(design, y, taus[i], lambda, penalty, warm.as_deref(), opts)?;
        warm = Some(f.coefficients.clone());
        out[i] = Some(f);
    }
    let fits: Vec<QuantileFit> = out.into_iter().flatten().collect();
    let bad = fits.iter().filter(|f| !f.certified).count();
    if bad > 0 {
        warn!("{bad} of {} quantile fits at lambda = {lambda} were not certified optimal", fits.len());
    }
    Ok(fits)
}

fn choose_lambda(
    design: &Design,
    y: &[f64],
    penalty: &nalgebra::DMatrix<f64>,
    fixed: Option<f64>,
    cfg: &SamplerConfig,
    what: &str,
) -> Result<f64> {
    let lambda = match fixed {
        Some(l) => l,
        None => gacv_select(design, y, &cfg.gacv_taus, penalty, &cfg.lambda_grid, &cfg.solver)?.lambda,
    };
    if lambda == 0.0 && design.n_rows() < design.n_cols() {
        return Err(Error::InvalidInput(format!(
            "{what} model: {} distinct rows cannot identify {} coefficients at lambda = 0",
            design.n_rows(),
            design.n_cols()
        )));
    }
    debug!("{what} lambda = {lambda}");
    Ok(lambda)
}

fn basis_for(values: &[f64], support: (f64, f64), cfg: &SamplerConfig) -> Result<BSplineBasis> {
    Ok(BSplineBasis::new(values, cfg.interior_knots, cfg.degree, support, cfg.placement)?)
}

fn yield_design(
    panel: &DetrendedPanel,
    price_basis: &BSplineBasis,
    stock_basis: Option<&BSplineBasis>,
    price: &[f64],
    stocks: &[f64],
) -> Result<Design> {
    let width = price_basis.dim() + stock_basis.map_or(0, |b| b.dim());
    let mut rows = vec![0.0; width * panel.year_count()];
    for t in 0..panel.year_count() {
        let row = &mut rows[t * width..(t + 1) * width];
        price_basis.eval_into(price[t], false, row)?;
        if let Some(sb) = stock_basis {
            sb.eval_into(stocks[t], false, &mut row[price_basis.dim()..])?;
        }
    }
    Ok(Design::grouped(width, rows, panel.obs_year.clone())?)
}

fn fit_yield_part(
    panel: &DetrendedPanel,
    price: &[f64],
    stocks: &[f64],
    price_support: (f64, f64),
    stock_support: Option<(f64, f64)>,
    cfg: &SamplerConfig,
) -> Result<(BSplineBasis, Option<BSplineBasis>, Vec<QuantileFit>, f64)> {
    let pb = basis_for(price, price_support, cfg)?;
    let sb = stock_support.map(|s| basis_for(stocks, s, cfg)).transpose()?;
    let design = yield_design(panel, &pb, sb.as_ref(), price, stocks)?;
    let mut blocks = vec![pb.dim()];
    if let Some(b) = &sb {
        blocks.push(b.dim());
    }
    let penalty = block_penalty(cfg.penalty_order, &blocks)?;
    let lambda = choose_lambda(&design, &panel.yields, &penalty, cfg.lambda_yield, cfg, "yield")?;
    let fits = fit_tau_grid(&design, &panel.yields, &cfg.tau_grid, lambda, &penalty, &cfg.solver)?;
    Ok((pb, sb, fits, lambda))
}

/// Price quantiles as splines in stocks and yield quantiles as additive
/// splines in (price, stocks).
pub fn fit_conditional(panel: &DetrendedPanel, cfg: &SamplerConfig) -> Result<ConditionalJointModel> {
    cfg.validate()?;
    if panel.yields.is_empty() {
        return Err(Error::InvalidInput("panel holds no yields".into()));
    }
    let (price_support, stock_support) = supports(panel, cfg.supports)?;
    let (price, c1) = clamp_count(&panel.price, price_support);
    let (stocks, c2) = clamp_count(&panel.stocks, stock_support);

    let price_part = || -> Result<PriceQuantiles> {
        let basis = basis_for(&stocks, stock_support, cfg)?;
        let p = basis.dim();
        let mut rows = vec![0.0; p * stocks.len()];
        for (t, &s) in stocks.iter().enumerate() {
            basis.eval_into(s, false, &mut rows[t * p..(t + 1) * p])?;
        }
        let design = Design::from_row_major(stocks.len(), p, rows)?;
        let penalty = block_penalty(cfg.penalty_order, &[p])?;
        let lambda = choose_lambda(&design, &panel.price, &penalty, cfg.lambda_price, cfg, "price")?;
        let fits = fit_tau_grid(&design, &panel.price, &cfg.tau_grid, lambda, &penalty, &cfg.solver)?;
        Ok(PriceQuantiles::Conditional { basis, fits, lambda })
    };
    let yield_part = || fit_yield_part(panel, &price, &stocks, price_support, Some(stock_support), cfg);
    let (pq, yq) = rayon::join(price_part, yield_part);
    let (ypb, ysb, yield_fits, yield_lambda) = yq?;
    Ok(ConditionalJointModel {
        tau_grid: cfg.tau_grid.clone(),
        price: pq?,
        yield_price_basis: ypb,
        yield_stock_basis: ysb,
        yield_fits,
        yield_lambda,
        price_support,
        stock_support,
        tau_clamp: cfg.tau_clamp,
        rearrange: cfg.rearrange,
        fit_clamps: c1 + c2,
    })
}

/// Minimizer of the summed check loss over a constant: the
/// ceil(n tau)-th order statistic, or the midpoint of the minimizing
/// interval when n tau is an integer.
pub fn sample_check_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let nt = n as f64 * tau;
    let k = nt.round();
    if (nt - k).abs() < 1e-9 && k >= 1.0 && (k as usize) < n {
        let k = k as usize;
        0.5 * (v[k - 1] + v[k])
    } else {
        v[(nt.ceil() as usize).clamp(1, n) - 1]
    }
}

/// Price quantiles that ignore stocks; yield quantiles conditional on
/// price only.
pub fn fit_unconditional(panel: &DetrendedPanel, cfg: &SamplerConfig) -> Result<ConditionalJointModel> {
    cfg.validate()?;
    if panel.yields.is_empty() {
        return Err(Error::InvalidInput("panel holds no yields".into()));
    }
    let (price_support, stock_support) = supports(panel, cfg.supports)?;
    let (price, c1) = clamp_count(&panel.price, price_support);
    let values = cfg.tau_grid.iter().map(|&t| sample_check_quantile(&panel.price, t)).collect();
    let (ypb, _, yield_fits, yield_lambda) = fit_yield_part(panel, &price, &panel.stocks, price_support, None, cfg)?;
    Ok(ConditionalJointModel {
        tau_grid: cfg.tau_grid.clone(),
        price: PriceQuantiles::Unconditional { values },
        yield_price_basis: ypb,
        yield_stock_basis: None,
        yield_fits,
        yield_lambda,
        price_support,
        stock_support,
        tau_clamp: cfg.tau_clamp,
        rearrange: cfg.rearrange,
        fit_clamps: c1,
    })
}

/// Linear interpolation of `(grid, values)` at `tau`, continued linearly
/// from the end segments.
pub fn interpolate_tau(grid: &[f64], values: &[f64], tau: f64) -> f64 {
    let n = grid.len();
    let i = match grid.partition_point(|g| *g <= tau) {
        0 => 0,
        k if k >= n => n - 2,
        k => k - 1,
    };
    let (g0, g1) = (grid[i], grid[i + 1]);
    values[i] + (tau - g0) * (values[i + 1] - values[i]) / (g1 - g0)
}

impl ConditionalJointModel {
    pub fn is_conditional(&self) -> bool {
        matches!(self.price, PriceQuantiles::Conditional { .. })
    }

    fn finish(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.rearrange {
            v.sort_by(f64::total_cmp);
        }
        v
    }

    fn check_stocks(&self, s: f64) -> Result<()> {
        let (lo, hi) = self.stock_support;
        if !(s >= lo && s <= hi) {
            return Err(Error::InvalidInput(format!("stocks value {s} lies outside the support [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Price quantiles on the tau grid at stocks `s` (rearranged if enabled).
    pub fn price_quantiles(&self, s: f64) -> Result<Vec<f64>> {
        match &self.price {
            PriceQuantiles::Conditional { basis, fits, .. } => {
                self.check_stocks(s)?;
                let row = basis.eval(s)?;
                Ok(self.finish(fits.iter().map(|f| f.predict(&row)).collect()))
            }
            PriceQuantiles::Unconditional { values } => Ok(self.finish(values.clone())),
        }
    }

    /// Yield quantiles on the tau grid at (price, stocks); price must lie in
    /// the price support.
    pub fn yield_quantiles(&self, p: f64, s: f64) -> Result<Vec<f64>> {
        let mut row = self.yield_price_basis.eval(p)?;
        if let Some(sb) = &self.yield_stock_basis {
            self.check_stocks(s)?;
            row.extend(sb.eval(s)?);
        }
        Ok(self.finish(self.yield_fits.iter().map(|f| f.predict(&row)).collect()))
    }

    pub fn price_quantile(&self, tau: f64, s: f64) -> Result<f64> {
        Ok(interpolate_tau(&self.tau_grid, &self.price_quantiles(s)?, tau))
    }

    pub fn yield_quantile(&self, tau: f64, p: f64, s: f64) -> Result<f64> {
        Ok(interpolate_tau(&self.tau_grid, &self.yield_quantiles(p, s)?, tau))
    }
}

/// `r` joint draws at stocks `s` (ignored by the unconditional model).
/// Draw blocks of 1024 use their own substreams of `seed`, so results do not
/// depend on the thread count.
pub fn sample(model: &ConditionalJointModel, s: f64, r: usize, seed: u64) -> Result<JointDraws> {
    if r == 0 {
        return Err(Error::InvalidInput("number of draws must be positive".into()));
    }
    let pq = model.price_quantiles(s)?;
    let (lo, hi) = model.tau_clamp;
    let (plo, phi) = model.price_support;
    let grid = &model.tau_grid;
    let blocks: Vec<usize> = (0..r.div_ceil(BLOCK)).collect();
    let parts: Vec<Result<Vec<(f64, f64, f64, f64, bool)>>> = blocks
        .par_iter()
        .map(|&b| {
            let mut rng = named_stream(seed, "joint", b as u64);
            let len = BLOCK.min(r - b * BLOCK);
            (0..len)
                .map(|_| {
                    let tp = rng.random_range(lo..=hi);
                    let ty = rng.random_range(lo..=hi);
                    let p = interpolate_tau(grid, &pq, tp);
                    let clamped = p < plo || p > phi;
                    let y = interpolate_tau(grid, &model.yield_quantiles(p.clamp(plo, phi), s)?, ty);
                    Ok((tp, ty, p, y, clamped))
                })
                .collect()
        })
        .collect();
    let mut d = JointDraws {
        stocks: model.is_conditional().then_some(s),
        seed,
        tau_price: Vec::with_capacity(r),
        tau_yield: Vec::with_capacity(r),
        price: Vec::with_capacity(r),
        yields: Vec::with_capacity(r),
        price_clamps: 0,
        price_level: Vec::new(),
        yield_level: Vec::new(),
    };
    for part in parts {
        for (tp, ty, p, y, c) in part? {
            d.tau_price.push(tp);
            d.tau_yield.push(ty);
            d.price.push(p);
            d.yields.push(y);
            d.price_clamps += usize::from(c);
        }
    }
    if d.price_clamps > 0 {
        debug!("{} of {r} price draws clamped into [{plo}, {phi}]", d.price_clamps);
    }
    Ok(d)
}

pub fn sample_conditional(model: &ConditionalJointModel, s: f64, r: usize, seed: u64) -> Result<JointDraws> {
    if !model.is_conditional() {
        return Err(Error::InvalidInput("model does not condition on stocks".into()));
    }
    sample(model, s, r, seed)
}

/// Fit the unconditional model and draw from it.
pub fn sample_unconditional(panel: &DetrendedPanel, cfg: &SamplerConfig, r: usize, seed: u64) -> Result<JointDraws> {
    let model = fit_unconditional(panel, cfg)?;
    sample(&model, f64::NAN, r, seed)
}

/// Where and how the detrended draws are mapped back to levels.
#[derive(Debug, Clone, Copy)]
pub struct RetrendTarget<'a> {
    pub price_trend: &'a TrendModel,
    pub yield_trend: &'a TrendModel,
    /// Time index and calendar year of the target year.
    pub t: f64,
    pub year: i32,
    /// Time index of the base year.
    pub t_base: f64,
    pub deflator: &'a Deflator,
}

/// Per draw: independent trend draws, exp/add, then re-basing.
pub fn retrend_and_rebase(draws: &mut JointDraws, target: &RetrendTarget<'_>, seed: u64) -> Result<()> {
    let r = draws.len();
    let defl = target.deflator.get(target.year)?;
    let shift = target.yield_trend.predict(target.t_base)? - target.yield_trend.predict(target.t)?;
    let blocks: Vec<usize> = (0..r.div_ceil(BLOCK)).collect();
    let parts: Vec<Result<Vec<(f64, f64)>>> = blocks
        .par_iter()
        .map(|&b| {
            let mut rng = named_stream(seed, "retrend", b as u64);
            (b * BLOCK..(b * BLOCK + BLOCK).min(r))
                .map(|i| {
                    let ph = draw_trend(target.price_trend, target.t, &mut rng)?;
                    let yh = draw_trend(target.yield_trend, target.t, &mut rng)?;
                    let p = (ph + draws.price[i]).exp();
                    let y = yh + draws.yields[i];
                    Ok((p / defl, y + shift))
                })
                .collect()
        })
        .collect();
    draws.price_level.clear();
    draws.yield_level.clear();
    for part in parts {
        for (p, y) in part? {
            draws.price_level.push(p);
            draws.yield_level.push(y);
        }
    }
    Ok(())
}
