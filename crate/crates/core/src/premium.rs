//! Indemnities, simulated premium rates under the two- and three-channel
//! models, loss ratios and the cede/retain rating game.
//!
//! Spring futures and implied volatility are regressed on the log scale on
//! B(s). A futures draw is a log-price draw and is exponentiated before it
//! enters the guarantee.

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bspline::{BSplineBasis, KnotPlacement};
use crate::joint_sampler::ConditionalJointModel;
use crate::linalg::default_lambda_grid;
use crate::rng::{named_stream, std_normal};
use crate::trend::{draw_trend, fit_penalized, TrendModel};
use crate::{Error, Result};

const BLOCK: usize = 1024;
const IV_REDRAWS: usize = 100;
const IV_FLOOR: f64 = 1e-6;

/// `max(psi * pbar * ybar - p * y, 0)`.
pub fn indemnity(psi: f64, pbar: f64, ybar: f64, p: f64, y: f64) -> Result<f64> {
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::InvalidInput(format!("coverage must lie in (0, 1], got {psi}")));
    }
    for (name, v) in [("futures price", pbar), ("APH yield", ybar), ("price", p)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    if !(y.is_finite() && y >= 0.0) {
        return Err(Error::InvalidInput(format!("yield must be non-negative, got {y}")));
    }
    Ok((psi * pbar * ybar - p * y).max(0.0))
}

/// Trailing mean of the yields observed in the `window` years before
/// `year`. Returns the mean and the number of years used; `None` when no
/// earlier year is observed.
pub fn aph_yield(history: &[(i32, f64)], year: i32, window: i32) -> Option<(f64, usize)> {
    let vals: Vec<f64> = history.iter().filter(|(y, _)| *y < year && *y >= year - window).map(|(_, v)| *v).collect();
    if vals.is_empty() {
        return None;
    }
    Some((vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
}

/// How the implied-volatility variance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IvMode {
    /// Level residuals `IV_t - exp(B'b)`, draws centred on `exp` of the
    /// log-scale trend draw.
    LevelConsistent,
    /// Residuals `IV_t - B'b` with `b` fitted to `log IV_t`, draws centred
    /// on the log-scale trend draw, exactly as the formulas are written.
    AsWritten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelOptions {
    pub interior_knots: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub placement: KnotPlacement,
    /// Observed stocks range widened by this fraction on each side.
    pub expand: f64,
    pub iv_mode: IvMode,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self {
            interior_knots: 4,
            degree: 3,
            penalty_order: 2,
            lambda_grid: default_lambda_grid(),
            placement: KnotPlacement::Quantile,
            expand: 0.05,
            iv_mode: IvMode::LevelConsistent,
        }
    }
}

/// Futures and implied-volatility curves in stocks.
#[derive(Debug, Clone)]
pub struct StockChannelModel {
    /// Fit of log spring futures.
    pub futures: TrendModel,
    /// Fit of log implied volatility; its sigma^2 drives the estimator draw.
    pub iv: TrendModel,
    /// Variance of IV+ around the centre.
    pub iv_sigma2: f64,
    pub iv_mode: IvMode,
}

/// Penalized LS of `log pbar_t` and `log IV_t` on B(s_t).
pub fn fit_stock_channels(stocks: &[f64], futures: &[f64], iv: &[f64], opts: &ChannelOptions) -> Result<StockChannelModel> {
    let t = stocks.len();
    if futures.len() != t || iv.len() != t {
        return Err(Error::InvalidInput("stocks, futures and IV differ in length".into()));
    }
    if let Some(v) = futures.iter().chain(iv).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!("futures and IV must be positive, got {v}")));
    }
    let lo = stocks.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stocks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = (hi - lo).max(f64::EPSILON);
    let support = (lo - opts.expand * w, hi + opts.expand * w);
    let basis = BSplineBasis::new(stocks, opts.interior_knots, opts.degree, support, opts.placement)?;
    if t < basis.dim() {
        return Err(Error::InvalidInput(format!("{t} years cannot identify {} coefficients", basis.dim())));
    }
    let log_f: Vec<f64> = futures.iter().map(|v| v.ln()).collect();
    let log_iv: Vec<f64> = iv.iter().map(|v| v.ln()).collect();
    let mut fm = fit_penalized(basis.clone(), stocks, &log_f, opts.penalty_order, &opts.lambda_grid)?;
    let mut im = fit_penalized(basis, stocks, &log_iv, opts.penalty_order, &opts.lambda_grid)?;
    fm.set_gram_from(stocks)?;
    im.set_gram_from(stocks)?;
    let denom = (t as f64 - 1.0).max(1.0);
    let iv_sigma2 = match opts.iv_mode {
        IvMode::LevelConsistent => {
            let mut ss = 0.0;
            for (s, v) in stocks.iter().zip(iv) {
                ss += (v - im.predict(*s)?.exp()).powi(2);
            }
            ss / denom
        }
        IvMode::AsWritten => {
            let mut ss = 0.0;
            for (s, v) in stocks.iter().zip(iv) {
                ss += (v - im.predict(*s)?).powi(2);
            }
            let s2 = ss / denom;
            im.set_sigma2(s2);
            s2
        }
    };
    Ok(StockChannelModel { futures: fm, iv: im, iv_sigma2, iv_mode: opts.iv_mode })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Yield quantiles conditional on price only.
    TwoChannel,
    /// Yield quantiles conditional on price and stocks.
    ThreeChannel,
}

/// Everything one premium simulation needs.
#[derive(Debug, Clone, Copy)]
pub struct PremiumSetup<'a> {
    pub channels: &'a StockChannelModel,
    /// Two-channel models carry no stocks basis in the yield quantiles.
    pub yield_model: &'a ConditionalJointModel,
    pub price_trend: &'a TrendModel,
    pub yield_trend: &'a TrendModel,
    /// Time index of the rated year.
    pub t: f64,
    pub stocks: f64,
    pub coverage: f64,
    pub aph: f64,
    /// Multiplier on IV+ as the sd of log price.
    pub iv_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiumEstimate {
    pub premium: f64,
    pub std_error: f64,
    pub draws: usize,
    pub iv_redraws: usize,
    pub iv_floored: usize,
    pub price_clamps: usize,
}

#[derive(Default)]
struct BlockStats {
    sum: f64,
    sumsq: f64,
    redraws: usize,
    floored: usize,
    clamps: usize,
}

/// Monte Carlo premium rate in $/acre.
pub fn simulate_premium(kind: ModelKind, setup: &PremiumSetup<'_>, r: usize, seed: u64) -> Result<PremiumEstimate> {
    if r == 0 {
        return Err(Error::InvalidInput("number of draws must be positive".into()));
    }
    if !(setup.coverage > 0.0 && setup.coverage <= 1.0) {
        return Err(Error::InvalidInput(format!("coverage must lie in (0, 1], got {}", setup.coverage)));
    }
    if !(setup.aph > 0.0) {
        return Err(Error::InvalidInput(format!("APH yield must be positive, got {}", setup.aph)));
    }
    let conditional_yield = setup.yield_model.yield_stock_basis.is_some();
    if conditional_yield != (kind == ModelKind::ThreeChannel) {
        return Err(Error::InvalidInput(format!("yield model does not match {kind:?}")));
    }
    let model = setup.yield_model;
    let s = if conditional_yield {
        let (lo, hi) = model.stock_support;
        setup.stocks.clamp(lo, hi)
    } else {
        setup.stocks
    };
    let (tlo, thi) = model.tau_clamp;
    let (plo, phi) = model.price_support;
    let ch = setup.channels;
    let iv_sd = ch.iv_sigma2.max(0.0).sqrt();
    let fut_sd = ch.futures.sigma2().max(0.0).sqrt();
    let blocks: Vec<usize> = (0..r.div_ceil(BLOCK)).collect();
    let parts: Vec<Result<BlockStats>> = blocks
        .par_iter()
        .map(|&b| {
            let mut rng = named_stream(seed, "premium", b as u64);
            let mut st = BlockStats::default();
            for _ in b * BLOCK..(b * BLOCK + BLOCK).min(r) {
                // (a) spring futures
                let log_fut_hat = draw_trend(&ch.futures, setup.stocks, &mut rng)?;
                let log_fut = log_fut_hat + fut_sd * std_normal(&mut rng);
                let fut = log_fut.exp();
                // (b) implied volatility
                let iv_hat = draw_trend(&ch.iv, setup.stocks, &mut rng)?;
                let centre = match ch.iv_mode {
                    IvMode::LevelConsistent => iv_hat.exp(),
                    IvMode::AsWritten => iv_hat,
                };
                let mut iv = centre + iv_sd * std_normal(&mut rng);
                let mut tries = 0;
                while iv < 0.0 && tries < IV_REDRAWS {
                    iv = centre + iv_sd * std_normal(&mut rng);
                    tries += 1;
                }
                st.redraws += tries;
                if iv < 0.0 {
                    iv = IV_FLOOR;
                    st.floored += 1;
                }
                // (c) harvest price
                let p = (log_fut + setup.iv_scale * iv * std_normal(&mut rng)).exp();
                // (d) detrended yield given detrended price
                let p_hat = draw_trend(setup.price_trend, setup.t, &mut rng)?;
                let mut p_tilde = p.ln() - p_hat;
                if p_tilde < plo || p_tilde > phi {
                    st.clamps += 1;
                    p_tilde = p_tilde.clamp(plo, phi);
                }
                let tau = rng.random_range(tlo..=thi);
                let y_tilde = model.yield_quantile(tau, p_tilde, s)?;
                // (e) yield level
                let y_hat = draw_trend(setup.yield_trend, setup.t, &mut rng)?;
                let y = (y_hat + y_tilde).max(0.0);
                let loss = (setup.coverage * fut * setup.aph - p * y).max(0.0);
                st.sum += loss;
                st.sumsq += loss * loss;
            }
            Ok(st)
        })
        .collect();
    let mut tot = BlockStats::default();
    for p in parts {
        let p = p?;
        tot.sum += p.sum;
        tot.sumsq += p.sumsq;
        tot.redraws += p.redraws;
        tot.floored += p.floored;
        tot.clamps += p.clamps;
    }
    if tot.floored > 0 {
        warn!("{} implied-volatility draws stayed negative after {IV_REDRAWS} redraws and were floored", tot.floored);
    }
    let n = r as f64;
    let mean = tot.sum / n;
    let var = if r > 1 { ((tot.sumsq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(PremiumEstimate {
        premium: mean,
        std_error: (var / n).sqrt(),
        draws: r,
        iv_redraws: tot.redraws,
        iv_floored: tot.floored,
        price_clamps: tot.clamps,
    })
}

/// Sum of indemnities over sum of premiums.
pub fn loss_ratio(indemnities: &[f64], premiums: &[f64]) -> Result<f64> {
    if indemnities.len() != premiums.len() {
        return Err(Error::InvalidInput("indemnities and premiums differ in length".into()));
    }
    let total: f64 = premiums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("total premium is zero".into()));
    }
    Ok(indemnities.iter().sum::<f64>() / total)
}

/// Policies of one year: realized indemnity and the two premium rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearPolicies {
    pub year: i32,
    pub indemnity: Vec<f64>,
    pub premium_three: Vec<f64>,
    pub premium_two: Vec<f64>,
}

/// Which method's rates play the reference (government) rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reference {
    TwoChannel,
    ThreeChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingYear {
    pub year: i32,
    /// None when a cede or retain bucket is empty.
    pub d: Option<f64>,
    pub ceded: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingGameResult {
    pub years: Vec<RatingYear>,
    pub d_star: usize,
    /// Years with a defined D_t.
    pub t: usize,
    pub excluded: usize,
    pub p_value: f64,
}

/// LR of ceded over LR of retained policies when `method` rates are
/// compared against `reference` rates; cede on a strictly higher rate.
/// Loss ratios use the reference premium. Returns the ratio and the bucket
/// sizes, or None for an empty bucket or when neither bucket has losses.
fn split_ratio(ind: &[f64], method: &[f64], reference: &[f64]) -> (Option<f64>, usize, usize) {
    let (mut ic, mut pc, mut ir, mut pr) = (0.0, 0.0, 0.0, 0.0);
    let (mut nc, mut nr) = (0, 0);
    for i in 0..ind.len() {
        if method[i] > reference[i] {
            ic += ind[i];
            pc += reference[i];
            nc += 1;
        } else {
            ir += ind[i];
            pr += reference[i];
            nr += 1;
        }
    }
    if nc == 0 || nr == 0 || !(pc > 0.0) || !(pr > 0.0) || (ic == 0.0 && ir == 0.0) {
        return (None, nc, nr);
    }
    if ir == 0.0 {
        return (Some(f64::INFINITY), nc, nr);
    }
    (Some((ic / pc) / (ir / pr)), nc, nr)
}

/// D_t = (LR3_C / LR3_R) / (LR2_C / LR2_R); the method whose rates are the
/// reference has ratio 1. D* counts years with D_t > 1 and the p-value is
/// P(X >= D*) for X ~ Binomial(T, 1/2) over the years with a defined D_t.
pub fn rating_game(years: &[YearPolicies], reference: Reference) -> Result<RatingGameResult> {
    let mut out = Vec::with_capacity(years.len());
    for yp in years {
        let n = yp.indemnity.len();
        if yp.premium_three.len() != n || yp.premium_two.len() != n {
            return Err(Error::InvalidInput(format!("year {}: policy vectors differ in length", yp.year)));
        }
        let (ref_rates, other) = match reference {
            Reference::TwoChannel => (&yp.premium_two, &yp.premium_three),
            Reference::ThreeChannel => (&yp.premium_three, &yp.premium_two),
        };
        let (ratio, nc, nr) = if other == ref_rates {
            (Some(1.0), 0, n)
        } else {
            split_ratio(&yp.indemnity, other, ref_rates)
        };
        let d = ratio.map(|x| match reference {
            Reference::TwoChannel => x,
            Reference::ThreeChannel => 1.0 / x,
        });
        out.push(RatingYear { year: yp.year, d, ceded: nc, retained: nr });
    }
    let t = out.iter().filter(|y| y.d.is_some()).count();
    let excluded = out.len() - t;
    if excluded > 0 {
        warn!("{excluded} years excluded from the rating game (empty cede or retain bucket)");
    }
    let d_star = out.iter().filter(|y| y.d.is_some_and(|d| d > 1.0)).count();
    Ok(RatingGameResult { years: out, d_star, t, excluded, p_value: binomial_upper_tail(t as u32, d_star as u32) })
}

/// P(X >= k) for X ~ Binomial(n, 1/2) by exact integer summation.
pub fn binomial_upper_tail(n: u32, k: u32) -> f64 {
    assert!(n <= 126, "binomial tail supports n <= 126");
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let mut c: u128 = 1;
    let mut sum: u128 = 0;
    for j in 0..=n {
        if j >= k {
            sum += c;
        }
        if j < n {
            c = c * u128::from(n - j) / u128::from(j + 1);
        }
    }
    sum as f64 / 2f64.powi(n as i32)
}

/// The same tail through log-gamma terms.
pub fn binomial_upper_tail_lgamma(n: u32, k: u32) -> f64 {
    let nf = f64::from(n);
    (k..=n)
        .map(|j| {
            let jf = f64::from(j);
            (ln_gamma(nf + 1.0) - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0) - nf * std::f64::consts::LN_2).exp()
        })
        .sum::<f64>()
        .min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint_sampler::{fit_conditional, fit_unconditional, DetrendedPanel, SamplerConfig};
    use crate::rng::substream;
    use crate::trend::{fit_trend, TrendOptions};

    #[test]
    fn indemnity_values() {
        assert!((indemnity(0.85, 4.0, 150.0, 3.0, 120.0).unwrap() - 150.0).abs() < 1e-9);
        assert_eq!(indemnity(0.85, 4.0, 150.0, 5.0, 160.0).unwrap(), 0.0);
        assert!((indemnity(0.85, 4.0, 150.0, 3.0, 0.0).unwrap() - 510.0).abs() < 1e-9);
        assert!(indemnity(0.85, 4.0, 150.0, -3.0, 1.0).is_err());
        assert!(indemnity(1.2, 4.0, 150.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn indemnity_convex_in_revenue() {
        // Revenue varied through y at p = 1.
        let f = |rev: f64| indemnity(0.8, 4.0, 150.0, 1.0, rev).unwrap();
        let grid: Vec<f64> = (0..=400).map(|i| f64::from(i) * 2.5).collect();
        for w in grid.windows(3) {
            let mid = f(w[1]);
            assert!(mid <= 0.5 * (f(w[0]) + f(w[2])) + 1e-9);
            assert!(f(w[2]) <= f(w[0]));
        }
    }

    #[test]
    fn aph_window() {
        let h: Vec<(i32, f64)> = (2000..2020).map(|y| (y, f64::from(y - 2000))).collect();
        assert_eq!(aph_yield(&h, 2015, 10), Some((9.5, 10)));
        assert_eq!(aph_yield(&h, 2003, 10), Some((1.0, 3)));
        assert_eq!(aph_yield(&h, 2000, 10), None);
    }

    #[test]
    fn loss_ratio_cases() {
        assert_eq!(loss_ratio(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(loss_ratio(&[0.0, 0.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(loss_ratio(&[1.0, 3.0], &[4.0, 4.0]).unwrap(), 0.5);
        assert!(loss_ratio(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn binomial_tails() {
        let want = [(15, 0.5), (16, 0.3555), (17, 0.2291), (19, 0.0680), (21, 0.0121)];
        for (k, p) in want {
            assert!((binomial_upper_tail(29, k) - p).abs() < 5e-4, "k = {k}");
        }
        assert_eq!(binomial_upper_tail(29, 29), 0.5f64.powi(29));
        for n in 1..=64 {
            for k in 0..=n {
                assert!((binomial_upper_tail(n, k) - binomial_upper_tail_lgamma(n, k)).abs() < 1e-12);
                if k > 0 {
                    assert!(binomial_upper_tail(n, k) <= binomial_upper_tail(n, k - 1));
                }
            }
        }
    }

    #[test]
    fn rating_game_identical_methods() {
        let years: Vec<YearPolicies> = (0..5)
            .map(|y| YearPolicies {
                year: 2000 + y,
                indemnity: vec![1.0, 0.0, 3.0],
                premium_three: vec![1.0, 2.0, 1.5],
                premium_two: vec![1.0, 2.0, 1.5],
            })
            .collect();
        let r = rating_game(&years, Reference::TwoChannel).unwrap();
        assert!(r.years.iter().all(|y| y.d == Some(1.0)));
        assert_eq!(r.d_star, 0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn rating_game_split() {
        // Method cedes the two high-loss policies.
        let yp = YearPolicies {
            year: 2001,
            indemnity: vec![4.0, 3.0, 1.0, 0.5],
            premium_three: vec![3.0, 3.0, 1.0, 1.0],
            premium_two: vec![2.0, 2.0, 2.0, 2.0],
        };
        let r = rating_game(std::slice::from_ref(&yp), Reference::TwoChannel).unwrap();
        // LR_C = 7/4, LR_R = 1.5/4.
        assert!((r.years[0].d.unwrap() - 7.0 / 1.5).abs() < 1e-12);
        assert_eq!(r.d_star, 1);
        let swapped = rating_game(&[yp], Reference::ThreeChannel).unwrap();
        assert!(swapped.years[0].d.is_some());
        let empty = YearPolicies {
            year: 2002,
            indemnity: vec![1.0, 1.0],
            premium_three: vec![1.0, 1.0],
            premium_two: vec![2.0, 2.0],
        };
        let r = rating_game(&[empty], Reference::TwoChannel).unwrap();
        assert_eq!((r.t, r.excluded), (0, 1));
    }

    fn small_panel(seed: u64) -> DetrendedPanel {
        let mut rng = substream(seed, 0);
        let t = 29;
        let stocks: Vec<f64> = (0..t).map(|i| 0.08 + 0.2 * f64::from(i) / 28.0).collect();
        let price: Vec<f64> = (0..t).map(|_| 0.25 * std_normal(&mut rng)).collect();
        let mut oy = Vec::new();
        let mut yv = Vec::new();
        for (i, p) in price.iter().enumerate() {
            for _ in 0..15 {
                oy.push(i);
                yv.push(-30.0 * p + 15.0 * std_normal(&mut rng));
            }
        }
        DetrendedPanel::new((1990..2019).collect(), price, stocks, oy, yv).unwrap()
    }

    struct Fixture {
        channels: StockChannelModel,
        cond: ConditionalJointModel,
        uncond: ConditionalJointModel,
        pt: TrendModel,
        yt: TrendModel,
    }

    fn fixture() -> Fixture {
        let panel = small_panel(12);
        let cfg = SamplerConfig {
            tau_grid: (1..=19).map(|k| f64::from(k) / 20.0).collect(),
            lambda_price: Some(1.0),
            lambda_yield: Some(1.0),
            ..Default::default()
        };
        let mut rng = substream(13, 0);
        let fut: Vec<f64> = panel.stocks.iter().map(|s| 4.5 - 6.0 * s + 0.1 * std_normal(&mut rng)).collect();
        let iv: Vec<f64> = panel.stocks.iter().map(|s| 0.3 - 0.5 * s + 0.01 * std_normal(&mut rng)).collect();
        let channels = fit_stock_channels(&panel.stocks, &fut, &iv, &ChannelOptions::default()).unwrap();
        let times: Vec<f64> = (1..=29).map(f64::from).collect();
        let lp: Vec<f64> = times.iter().map(|x| 1.0 + 0.01 * x + 0.1 * std_normal(&mut rng)).collect();
        let yv: Vec<f64> = times.iter().map(|x| 120.0 + 2.0 * x + 8.0 * std_normal(&mut rng)).collect();
        Fixture {
            channels,
            cond: fit_conditional(&panel, &cfg).unwrap(),
            uncond: fit_unconditional(&panel, &cfg).unwrap(),
            pt: fit_trend(&times, &lp, &TrendOptions::default()).unwrap(),
            yt: fit_trend(&times, &yv, &TrendOptions::default()).unwrap(),
        }
    }

    #[test]
    fn stock_channel_gram_and_decreasing_iv() {
        let mut rng = substream(21, 0);
        let s: Vec<f64> = (0..29).map(|i| 0.08 + 0.2 * f64::from(i) / 28.0).collect();
        let fut = vec![4.0; 29];
        let iv: Vec<f64> = s.iter().map(|x| 0.35 - 0.8 * x + 0.005 * std_normal(&mut rng)).collect();
        let m = fit_stock_channels(&s, &fut, &iv, &ChannelOptions::default()).unwrap();
        assert!(m.futures.sigma2() < 1e-20);
        for x in &s {
            assert!((m.futures.predict(*x).unwrap() - 4.0f64.ln()).abs() < 1e-10);
        }
        let lo = m.iv.predict(0.09).unwrap();
        let hi = m.iv.predict(0.27).unwrap();
        assert!(hi < lo);
        let p = m.futures.basis().dim();
        let mut g = nalgebra::DMatrix::<f64>::zeros(p, p);
        for x in &s {
            let b = nalgebra::DVector::from_vec(m.futures.basis().eval(*x).unwrap());
            g += &b * b.transpose();
        }
        g /= 29.0;
        assert!((&g - m.futures.gram()).amax() < 1e-12);
    }

    #[test]
    fn premium_monotone_in_coverage() {
        let f = fixture();
        let mut last = 0.0;
        for psi in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let setup = PremiumSetup {
                channels: &f.channels,
                yield_model: &f.cond,
                price_trend: &f.pt,
                yield_trend: &f.yt,
                t: 29.0,
                stocks: 0.15,
                coverage: psi,
                aph: 170.0,
                iv_scale: 1.0,
            };
            let p = simulate_premium(ModelKind::ThreeChannel, &setup, 2000, 5).unwrap();
            assert!(p.premium >= last);
            last = p.premium;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn premium_requires_matching_model() {
        let f = fixture();
        let setup = PremiumSetup {
            channels: &f.channels,
            yield_model: &f.uncond,
            price_trend: &f.pt,
            yield_trend: &f.yt,
            t: 29.0,
            stocks: 0.15,
            coverage: 0.8,
            aph: 170.0,
            iv_scale: 1.0,
        };
        assert!(simulate_premium(ModelKind::ThreeChannel, &setup, 10, 1).is_err());
        assert!(simulate_premium(ModelKind::TwoChannel, &setup, 10, 1).is_ok());
    }

    #[test]
    fn deterministic_premiums() {
        let mut f = fixture();
        f.channels.futures.set_sigma2(0.0);
        f.channels.iv.set_sigma2(0.0);
        f.channels.iv_sigma2 = 0.0;
        f.pt.set_sigma2(0.0);
        f.yt.set_sigma2(0.0);
        // Constant yield quantiles.
        for fit in f.uncond.yield_fits.iter_mut() {
            fit.coefficients.iter_mut().for_each(|c| *c = 0.0);
        }
        let fut = f.channels.futures.predict(0.15).unwrap().exp();
        let y = f.yt.predict(29.0).unwrap();
        let mut setup = PremiumSetup {
            channels: &f.channels,
            yield_model: &f.uncond,
            price_trend: &f.pt,
            yield_trend: &f.yt,
            t: 29.0,
            stocks: 0.15,
            coverage: 1.0,
            aph: (fut * y + 50.0) / fut,
            iv_scale: 0.0,
        };
        let p = simulate_premium(ModelKind::TwoChannel, &setup, 300, 3).unwrap();
        assert!((p.premium - 50.0).abs() < 1e-9, "{}", p.premium);
        setup.aph = y * 0.5;
        assert_eq!(simulate_premium(ModelKind::TwoChannel, &setup, 300, 3).unwrap().premium, 0.0);
    }
}
