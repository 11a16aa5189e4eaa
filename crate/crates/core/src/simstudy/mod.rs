//! Monte Carlo validation harness on synthetic panels with known truth.

mod kde;
mod skew;

pub use kde::{kde2d, mise, mise_values, reference_bandwidth, DensityGrid};
pub use skew::{owens_t, skew_normal_draw, standardizing_params, StdSkewNormal};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::joint_sampler::{fit_conditional, sample, ConditionalJointModel, DetrendedPanel, SamplerConfig, SupportMode};
use crate::linalg::quantile_sorted;
use crate::rng::named_stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceMode {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub years: usize,
    pub counties: usize,
    pub replicates: usize,
    pub price_mode: PriceMode,
    pub alpha_price: f64,
    pub alpha_yield: f64,
    pub stock_beta: (f64, f64),
    pub seed: u64,
    /// Joint draws per stock level for the density estimate.
    pub draws: usize,
    pub kde_grid: usize,
    pub mise_stocks: Vec<f64>,
    pub curve_taus: Vec<f64>,
    /// Stock grid for the price quantile curves.
    pub curve_stocks: Vec<f64>,
    pub sampler: SamplerConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        let sampler = SamplerConfig {
            supports: SupportMode::Fixed { price: (-1.0, 1.0), stocks: (0.0, 1.0) },
            ..SamplerConfig::default()
        };
        Self {
            years: 100,
            counties: 500,
            replicates: 100,
            price_mode: PriceMode::Linear,
            alpha_price: 3.0,
            alpha_yield: -3.0,
            stock_beta: (7.0, 44.0),
            seed: 20_190_501,
            draws: 10_000,
            kde_grid: 25,
            mise_stocks: vec![0.093, 0.173, 0.281],
            curve_taus: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            curve_stocks: linspace(0.0484, 0.2671, 50),
            sampler,
        }
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.years == 0 || self.counties == 0 || self.replicates == 0 || self.draws < 2 || self.kde_grid < 2 {
            return Err(Error::InvalidInput("simulation counts must be positive".into()));
        }
        if !(self.alpha_price > 0.0 && self.alpha_yield < 0.0) {
            return Err(Error::InvalidInput("price errors need alpha > 0 and yield errors alpha < 0".into()));
        }
        if !(self.stock_beta.0 > 0.0 && self.stock_beta.1 > 0.0) {
            return Err(Error::InvalidInput("beta shape parameters must be positive".into()));
        }
        if self.curve_taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput("curve quantile levels must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn price_location(&self, s: f64) -> (f64, f64) {
        match self.price_mode {
            PriceMode::Linear => (0.2 - 0.4 * s, 0.5 - 0.5 * s),
            PriceMode::Nonlinear => (-0.2 + 0.4 * (-2.0 * s).exp(), 0.5 * (-2.0 * s).exp()),
        }
    }

    pub fn yield_location(&self, p: f64, s: f64) -> (f64, f64) {
        (-25.0 + 14.45 * p.exp() + 22.18 * s, 33.0)
    }

    pub fn true_quantile_price(&self, tau: f64, s: f64) -> f64 {
        let (m, sd) = self.price_location(s);
        m + sd * StdSkewNormal::new(self.alpha_price).quantile(tau)
    }

    pub fn true_quantile_yield(&self, tau: f64, p: f64, s: f64) -> f64 {
        let (m, sd) = self.yield_location(p, s);
        m + sd * StdSkewNormal::new(self.alpha_yield).quantile(tau)
    }

    /// g(y, p | s) = g(y | p, s) g(p | s).
    pub fn true_joint_density(&self, y: f64, p: f64, s: f64) -> f64 {
        let (mp, sp) = self.price_location(s);
        let (my, sy) = self.yield_location(p, s);
        let gp = StdSkewNormal::new(self.alpha_price).pdf((p - mp) / sp) / sp;
        let gy = StdSkewNormal::new(self.alpha_yield).pdf((y - my) / sy) / sy;
        gy * gp
    }
}

/// One synthetic panel; yields are stored year-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPanel {
    pub stocks: Vec<f64>,
    pub price: Vec<f64>,
    pub yields: Vec<f64>,
    pub counties: usize,
}

impl SimPanel {
    pub fn to_detrended(&self) -> Result<DetrendedPanel> {
        let years: Vec<i32> = (1..=self.stocks.len() as i32).collect();
        let obs_year = (0..self.stocks.len()).flat_map(|t| std::iter::repeat_n(t, self.counties)).collect();
        DetrendedPanel::new(years, self.price.clone(), self.stocks.clone(), obs_year, self.yields.clone())
    }
}

pub fn draw_stocks<R: Rng + ?Sized>(cfg: &SimConfig, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let beta = Beta::new(cfg.stock_beta.0, cfg.stock_beta.1).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((0..n).map(|_| beta.sample(rng)).collect())
}

pub fn generate_panel<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimPanel> {
    cfg.validate()?;
    let stocks = draw_stocks(cfg, cfg.years, rng)?;
    let mut price = Vec::with_capacity(cfg.years);
    let mut yields = Vec::with_capacity(cfg.years * cfg.counties);
    for &s in &stocks {
        let (mp, sp) = cfg.price_location(s);
        let p = mp + sp * skew_normal_draw(cfg.alpha_price, rng);
        let (my, sy) = cfg.yield_location(p, s);
        for _ in 0..cfg.counties {
            yields.push(my + sy * skew_normal_draw(cfg.alpha_yield, rng));
        }
        price.push(p);
    }
    Ok(SimPanel { stocks, price, yields, counties: cfg.counties })
}

/// Truth evaluated on an estimate's grid, axes (yield, price).
pub fn truth_on_grid(cfg: &SimConfig, grid: &DensityGrid, s: f64) -> Vec<f64> {
    grid.x
        .iter()
        .flat_map(|&y| grid.y.iter().map(move |&p| cfg.true_joint_density(y, p, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    /// `price_curves[k][i]`: estimated tau_k price quantile at `curve_stocks[i]`.
    pub price_curves: Vec<Vec<f64>>,
    pub mise: Vec<f64>,
    pub lambda_price: Option<f64>,
    pub lambda_yield: f64,
    pub fit_clamps: usize,
}

fn price_curves(cfg: &SimConfig, model: &ConditionalJointModel) -> Result<Vec<Vec<f64>>> {
    cfg.curve_taus
        .iter()
        .map(|&tau| cfg.curve_stocks.iter().map(|&s| model.price_quantile(tau, s)).collect())
        .collect()
}

fn price_lambda(model: &ConditionalJointModel) -> Option<f64> {
    match &model.price {
        crate::joint_sampler::PriceQuantiles::Conditional { lambda, .. } => Some(*lambda),
        crate::joint_sampler::PriceQuantiles::Unconditional { .. } => None,
    }
}

/// Fits the model on replicate `m` and scores it by MISE at each stock
/// level in `cfg.mise_stocks`.
pub fn run_replicate(cfg: &SimConfig, m: usize) -> Result<ReplicateResult> {
    let mut rng = named_stream(cfg.seed, "panel", m as u64);
    let panel = generate_panel(cfg, &mut rng)?.to_detrended()?;
    let model = fit_conditional(&panel, &cfg.sampler)?;
    let mise = cfg
        .mise_stocks
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let seed = named_stream(cfg.seed, "draws", (m * cfg.mise_stocks.len() + k) as u64).random();
            let d = sample(&model, s, cfg.draws, seed)?;
            let grid = kde2d(&d.yields, &d.price, cfg.kde_grid, None)?;
            mise_values(&grid, &truth_on_grid(cfg, &grid, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateResult {
        index: m,
        price_curves: price_curves(cfg, &model)?,
        mise,
        lambda_price: price_lambda(&model),
        lambda_yield: model.yield_lambda,
        fit_clamps: model.fit_clamps,
    })
}

/// Price quantile curves only. The price fit ignores yields, so a
/// one-county panel gives the same curves as [`run_replicate`] at less cost.
pub fn run_price_replicate(cfg: &SimConfig, m: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = named_stream(cfg.seed, "panel", m as u64);
    let panel = generate_panel(cfg, &mut rng)?;
    let thin = SimPanel {
        yields: (0..panel.stocks.len()).map(|t| panel.yields[t * panel.counties]).collect(),
        counties: 1,
        ..panel
    };
    let mut sampler = cfg.sampler.clone();
    sampler.lambda_yield = Some(sampler.lambda_yield.unwrap_or(1.0));
    let model = fit_conditional(&thin.to_detrended()?, &sampler)?;
    price_curves(cfg, &model)
}

/// Share of curve points where the truth lies inside the pointwise
/// (0.025, 0.975) band of the replicate curves, per tau.
pub fn band_coverage(cfg: &SimConfig, curves: &[Vec<Vec<f64>>]) -> Vec<f64> {
    cfg.curve_taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let hits = cfg
                .curve_stocks
                .iter()
                .enumerate()
                .filter(|&(i, &s)| {
                    let mut v: Vec<f64> = curves.iter().map(|c| c[k][i]).collect();
                    v.sort_by(f64::total_cmp);
                    let q = cfg.true_quantile_price(tau, s);
                    quantile_sorted(&v, 0.025) <= q && q <= quantile_sorted(&v, 0.975)
                })
                .count();
            hits as f64 / cfg.curve_stocks.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: SimConfig,
    pub replicates: Vec<ReplicateResult>,
    /// MISE averaged over replicates, one per stock level.
    pub mise: Vec<f64>,
    pub coverage: Vec<f64>,
}

pub fn run_study(cfg: &SimConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let replicates = (0..cfg.replicates).into_par_iter().map(|m| run_replicate(cfg, m)).collect::<Result<Vec<_>>>()?;
    let mise = (0..cfg.mise_stocks.len())
        .map(|k| replicates.iter().map(|r| r.mise[k]).sum::<f64>() / replicates.len() as f64)
        .collect();
    let curves: Vec<_> = replicates.iter().map(|r| r.price_curves.clone()).collect();
    let coverage = band_coverage(cfg, &curves);
    Ok(StudyResult { config: cfg.clone(), replicates, mise, coverage })
}
