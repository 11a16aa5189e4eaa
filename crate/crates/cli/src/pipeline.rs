//! Subcommand implementations.

use std::collections::BTreeMap;

use log::info;
use serde::Serialize;
use serde_json::json;
use sqr_core::joint_sampler::{
    fit_conditional, fit_unconditional, retrend_and_rebase, sample, ConditionalJointModel, DetrendedPanel,
    PriceQuantiles, RetrendTarget, SamplerConfig, SupportMode, supports,
};
use sqr_core::linalg::quantile;
use sqr_core::premium::{
    aph_yield, fit_stock_channels, indemnity, rating_game, simulate_premium, ChannelOptions, ModelKind, PremiumSetup,
    RatingGameResult, StockChannelModel, YearPolicies,
};
use sqr_core::rng::derive_seed;
use sqr_core::simstudy::{linspace, run_study, SimConfig};
use sqr_core::stats::{fit_ar1, jackknife, jackknife_groups, moments_from_draws, smooth_curve};
use sqr_core::trend::{
    detrend, fit_state_trends, fit_trend, normalize_stocks, year_index, Deflator, DetrendMode, MarketSeries,
    TrendModel, TrendOptions, YieldPanel, YieldRecord,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result, Stage};
use crate::ingest::{decade_summary, ingest_market, ingest_yields, state_counts};
use crate::output::{num, Outputs};

pub const COMMANDS: [&str; 7] = ["detrend", "fit", "sample", "correlate", "premium", "rating-game", "simstudy"];

/// One state's detrended panel and yield trend.
pub struct StateData {
    pub name: String,
    pub trend: TrendModel,
    pub records: Vec<YieldRecord>,
    pub tilde: Vec<f64>,
    pub panel: DetrendedPanel,
    /// `(county, year)` of each record, in record order.
    pub keys: Vec<(String, i32)>,
}

/// Ingested and detrended inputs shared by the data subcommands.
pub struct Prepared {
    pub market: MarketSeries,
    pub first_year: i32,
    pub times: Vec<f64>,
    pub stocks: Vec<f64>,
    pub price_trend: TrendModel,
    pub price_tilde: Vec<f64>,
    pub deflator: Deflator,
    pub base_year: i32,
    pub target_year: i32,
    pub states: Vec<StateData>,
}

impl Prepared {
    pub fn time(&self, year: i32) -> f64 {
        year_index(year, self.first_year)
    }

    fn target<'a>(&'a self, st: &'a StateData) -> RetrendTarget<'a> {
        RetrendTarget {
            price_trend: &self.price_trend,
            yield_trend: &st.trend,
            t: self.time(self.target_year),
            year: self.target_year,
            t_base: self.time(self.base_year),
            deflator: &self.deflator,
        }
    }

    /// `n` points spanning the observed normalized stocks.
    pub fn stock_grid(&self, n: usize) -> Vec<f64> {
        let lo = self.stocks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.stocks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        linspace(lo, hi, n)
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let market_path = cfg.path("market")?;
    let yields_path = cfg.path("yields")?;
    let market = ingest_market(&market_path)?;
    let panel = ingest_yields(&yields_path)?;
    let available = panel.states();
    let wanted = cfg.states().unwrap_or_else(|| available.clone());
    if let Some(s) = wanted.iter().find(|s| !available.contains(s)) {
        return Err(CliError::Config(format!("state '{s}' has no yield records")));
    }
    for r in panel.records() {
        if market.index_of(r.year).is_none() {
            return Err(CliError::Ingest {
                path: yields_path.display().to_string(),
                msg: format!("year {} of {}/{} is not in the market series", r.year, r.state, r.county),
            });
        }
    }
    let first_year = market.years[0];
    let last_year = *market.years.last().unwrap_or(&first_year);
    let base_year = cfg.opt_parse::<i32>("base_year")?.unwrap_or(last_year);
    let target_year = cfg.opt_parse::<i32>("target_year")?.unwrap_or(last_year);
    let opts = TrendOptions { knot_spacing: cfg.get::<f64>("knot_spacing")?, ..TrendOptions::default() };

    let stocks = normalize_stocks(&market, cfg.get("loess_span")?).stage("normalize stocks")?;
    let times: Vec<f64> = market.years.iter().map(|&y| year_index(y, first_year)).collect();
    let log_price: Vec<f64> = market.harvest_price.iter().map(|p| p.ln()).collect();
    let price_trend = fit_trend(&times, &log_price, &opts).stage("price trend")?;
    let price_tilde = detrend(&market.harvest_price, &times, &price_trend, DetrendMode::LogPrice).stage("detrend price")?;
    let deflator = Deflator::new(&market.years, &market.gdp_deflator, base_year).stage("deflator")?;

    let chosen: Vec<YieldRecord> = panel.records().iter().filter(|r| wanted.contains(&r.state)).cloned().collect();
    let chosen = YieldPanel::new(chosen).stage("yield panel")?;
    let trends = fit_state_trends(&chosen, first_year, &opts).stage("yield trends")?;
    let mut states = Vec::new();
    for (name, trend) in trends {
        let records = chosen.for_state(&name).records().to_vec();
        let t: Vec<f64> = records.iter().map(|r| year_index(r.year, first_year)).collect();
        let v: Vec<f64> = records.iter().map(|r| r.value).collect();
        let tilde = detrend(&v, &t, &trend, DetrendMode::LevelYield).stage("detrend yields")?;
        let obs_year = records.iter().map(|r| market.index_of(r.year).unwrap_or(0)).collect();
        let panel = DetrendedPanel::new(market.years.clone(), price_tilde.clone(), stocks.clone(), obs_year, tilde.clone())
            .stage("detrended panel")?;
        let keys = records.iter().map(|r| (r.county.clone(), r.year)).collect();
        info!("{name}: {} yield records", records.len());
        states.push(StateData { name, trend, records, tilde, panel, keys });
    }
    Ok(Prepared { market, first_year, times, stocks, price_trend, price_tilde, deflator, base_year, target_year, states })
}

pub fn sampler_config(cfg: &RunConfig) -> Result<SamplerConfig> {
    let mut s = SamplerConfig::default();
    if let Some(g) = cfg.list("tau_grid")? {
        s.tau_grid = g;
    }
    if let Some(g) = cfg.list("lambda_grid")? {
        s.lambda_grid = g;
    }
    s.gacv_taus = cfg.list("gacv_taus")?.unwrap_or(s.gacv_taus);
    s.lambda_price = cfg.opt_parse("lambda_price")?;
    s.lambda_yield = cfg.opt_parse("lambda_yield")?;
    s.interior_knots = cfg.get("interior_knots")?;
    let c = cfg.list("tau_clamp")?.unwrap_or_default();
    s.tau_clamp = (c[0], c[1]);
    Ok(s)
}

fn price_lambda(m: &ConditionalJointModel) -> Option<f64> {
    match &m.price {
        PriceQuantiles::Conditional { lambda, .. } => Some(*lambda),
        PriceQuantiles::Unconditional { .. } => None,
    }
}

fn smooth(x: &[f64], y: &[f64], span: f64) -> Result<Vec<f64>> {
    smooth_curve(x, y, x, span).stage("loess")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Runs one subcommand, writing its outputs into `out`.
pub fn run_command(command: &str, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    match command {
        "detrend" => cmd_detrend(cfg, out),
        "fit" => cmd_fit(cfg, out),
        "sample" => cmd_sample(cfg, out),
        "correlate" => cmd_correlate(cfg, out),
        "premium" => cmd_premium(cfg, out),
        "rating-game" => cmd_rating_game(cfg, out),
        "simstudy" => cmd_simstudy(cfg, out),
        other => Err(CliError::Config(format!("unknown subcommand '{other}'"))),
    }
}

fn cmd_detrend(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let prep = prepare(cfg)?;
    let m = &prep.market;
    let mut rows = Vec::new();
    for (i, &year) in m.years.iter().enumerate() {
        rows.push(vec![
            year.to_string(),
            num(prep.times[i]),
            num(m.harvest_price[i]),
            num(prep.price_trend.predict(prep.times[i]).stage("price trend")?),
            num(prep.price_tilde[i]),
            num(m.stocks[i]),
            num(prep.stocks[i]),
            num(prep.deflator.get(year).stage("deflator")?),
        ]);
    }
    out.write_csv(
        "market_detrended.csv",
        &["year", "t", "harvest_price", "log_price_trend", "price_tilde", "stocks", "stocks_tilde", "deflator"],
        &rows,
    )?;
    let mut rows = Vec::new();
    let mut trends = BTreeMap::new();
    for st in &prep.states {
        for (r, d) in st.records.iter().zip(&st.tilde) {
            rows.push(vec![
                st.name.clone(),
                r.county.clone(),
                r.year.to_string(),
                num(r.value),
                num(r.value - d),
                num(*d),
            ]);
        }
        trends.insert(
            st.name.clone(),
            json!({"lambda": st.trend.lambda(), "sigma2": st.trend.sigma2(), "n": st.trend.sample_count()}),
        );
    }
    out.write_csv("yields_detrended.csv", &["state", "county", "year", "yield", "trend", "yield_tilde"], &rows)?;
    out.write_json(
        "trends.json",
        &json!({
            "price": {"lambda": prep.price_trend.lambda(), "sigma2": prep.price_trend.sigma2(),
                      "coefficients": prep.price_trend.coefficients().len()},
            "states": trends,
        }),
    )?;
    let panel = ingest_yields(&cfg.path("yields")?)?;
    out.write_json(
        "ingest.json",
        &json!({"decades": decade_summary(m), "gaps": m.gaps(), "counts": state_counts(&panel)}),
    )
}

fn cmd_fit(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let prep = prepare(cfg)?;
    let scfg = sampler_config(cfg)?;
    let taus = cfg.list("curve_taus")?.unwrap_or_default();
    let n = cfg.get::<usize>("stock_points")?;
    let span: f64 = cfg.get("curve_span")?;
    let grid = prep.stock_grid(n);
    let quartiles: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&p| quantile(&prep.stocks, p)).collect();
    let (mut price_rows, mut yield_rows) = (Vec::new(), Vec::new());
    let mut summary = BTreeMap::new();
    for st in &prep.states {
        let model = fit_conditional(&st.panel, &scfg).stage("quantile fit")?;
        for &tau in &taus {
            let q: Vec<f64> = grid.iter().map(|&s| model.price_quantile(tau, s)).collect::<sqr_core::Result<_>>().stage("price quantiles")?;
            let q_s = smooth(&grid, &q, span)?;
            for i in 0..grid.len() {
                price_rows.push(vec![st.name.clone(), num(grid[i]), num(tau), num(q[i]), num(q_s[i])]);
            }
        }
        let (plo, phi) = model.price_support;
        let pgrid = linspace(plo, phi, n);
        for &s in &quartiles {
            for &tau in &taus {
                for &p in &pgrid {
                    let q = model.yield_quantile(tau, p, s).stage("yield quantiles")?;
                    yield_rows.push(vec![st.name.clone(), num(s), num(p), num(tau), num(q)]);
                }
            }
        }
        let uncertified = model.yield_fits.iter().filter(|f| !f.certified).count()
            + match &model.price {
                PriceQuantiles::Conditional { fits, .. } => fits.iter().filter(|f| !f.certified).count(),
                PriceQuantiles::Unconditional { .. } => 0,
            };
        summary.insert(
            st.name.clone(),
            json!({
                "lambda_price": price_lambda(&model),
                "lambda_yield": model.yield_lambda,
                "fit_clamps": model.fit_clamps,
                "uncertified_fits": uncertified,
                "observations": st.records.len(),
                "price_support": model.price_support,
                "stock_support": model.stock_support,
            }),
        );
    }
    out.write_csv("price_quantiles.csv", &["state", "stocks", "tau", "quantile", "quantile_loess"], &price_rows)?;
    out.write_csv("yield_quantiles.csv", &["state", "stocks", "price_tilde", "tau", "quantile"], &yield_rows)?;
    out.write_json("fit.json", &summary)
}

fn cmd_sample(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let prep = prepare(cfg)?;
    let scfg = sampler_config(cfg)?;
    let r: usize = cfg.get("draws")?;
    let seed = cfg.seed();
    let levels = match cfg.list("sample_stocks")? {
        Some(v) => v,
        None => [0.25, 0.5, 0.75].iter().map(|&p| quantile(&prep.stocks, p)).collect(),
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (si, st) in prep.states.iter().enumerate() {
        let model = fit_conditional(&st.panel, &scfg).stage("quantile fit")?;
        let target = prep.target(st);
        for (k, &s) in levels.iter().enumerate() {
            let job = (si * levels.len() + k) as u64;
            let mut d = sample(&model, s, r, derive_seed(seed, "sample", job)).stage("sampling")?;
            retrend_and_rebase(&mut d, &target, derive_seed(seed, "sample-retrend", job)).stage("retrend")?;
            for i in 0..d.len() {
                rows.push(vec![
                    st.name.clone(),
                    num(s),
                    i.to_string(),
                    num(d.tau_price[i]),
                    num(d.tau_yield[i]),
                    num(d.price[i]),
                    num(d.yields[i]),
                    num(d.price_level[i]),
                    num(d.yield_level[i]),
                ]);
            }
            summary.push(json!({"state": st.name, "stocks": s, "draws": r, "clamp_fraction": d.clamp_fraction()}));
        }
    }
    out.write_csv(
        "draws.csv",
        &["state", "stocks", "draw", "tau_price", "tau_yield", "price_tilde", "yield_tilde", "price", "yield"],
        &rows,
    )?;
    out.write_json(
        "sample.json",
        &json!({"target_year": prep.target_year, "base_year": prep.base_year, "levels": summary}),
    )
}

/// Correlation and price sd at each stocks level, then the unconditional
/// pair: `[corr.., sd.., corr_u, sd_u]`.
fn correlation_estimates(
    panel: &DetrendedPanel,
    scfg: &SamplerConfig,
    grid: &[f64],
    target: &RetrendTarget<'_>,
    r: usize,
    seed: u64,
) -> sqr_core::Result<Vec<f64>> {
    let cond = fit_conditional(panel, scfg)?;
    let unc = fit_unconditional(panel, scfg)?;
    let n = grid.len();
    let mut est = vec![0.0; 2 * n + 2];
    for (k, &s) in grid.iter().enumerate() {
        let mut d = sample(&cond, s, r, derive_seed(seed, "correlate", k as u64))?;
        retrend_and_rebase(&mut d, target, derive_seed(seed, "correlate-retrend", k as u64))?;
        let m = moments_from_draws(&d)?;
        est[k] = m.corr;
        est[n + k] = m.sd_price;
    }
    let mut d = sample(&unc, f64::NAN, r, derive_seed(seed, "correlate", n as u64))?;
    retrend_and_rebase(&mut d, target, derive_seed(seed, "correlate-retrend", n as u64))?;
    let m = moments_from_draws(&d)?;
    est[2 * n] = m.corr;
    est[2 * n + 1] = m.sd_price;
    Ok(est)
}

fn cmd_correlate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let prep = prepare(cfg)?;
    let scfg = sampler_config(cfg)?;
    let r: usize = cfg.get("draws")?;
    let b: usize = cfg.get("jackknife_groups")?;
    let span: f64 = cfg.get("curve_span")?;
    let scheme = cfg.group_scheme()?;
    let grid = prep.stock_grid(cfg.get("stock_points")?);
    let n = grid.len();
    let mut rows = Vec::new();
    let mut ar1_rows = Vec::new();
    for (si, st) in prep.states.iter().enumerate() {
        let target = prep.target(st);
        let seed = derive_seed(cfg.seed(), &st.name, si as u64);
        let est = correlation_estimates(&st.panel, &scfg, &grid, &target, r, seed).stage("correlation")?;
        let groups = jackknife_groups(&st.keys, b, scheme).stage("jackknife groups")?;
        // Leave-out fits share the full-sample supports so the grid stays inside them.
        let (price, stocks) = supports(&st.panel, scfg.supports).stage("correlation")?;
        let jk_cfg = SamplerConfig { supports: SupportMode::Fixed { price, stocks }, ..scfg.clone() };
        let jk = jackknife(&groups, b, |keep| {
            correlation_estimates(&st.panel.subset(keep)?, &jk_cfg, &grid, &target, r, seed)
        })
        .stage("jackknife")?;
        let se: Vec<f64> = jk.variance.iter().map(|v| v.sqrt()).collect();
        let corr_s = smooth(&grid, &est[..n], span)?;
        let sd_s = smooth(&grid, &est[n..2 * n], span)?;
        for k in 0..n {
            let (c, cs) = (est[k], se[k]);
            let (sd, ss) = (est[n + k], se[n + k]);
            rows.push(vec![
                st.name.clone(),
                num(grid[k]),
                num(c),
                num(corr_s[k]),
                num(cs),
                num(c - 1.96 * cs),
                num(c + 1.96 * cs),
                num(sd),
                num(sd_s[k]),
                num(ss),
                num(sd - 1.96 * ss),
                num(sd + 1.96 * ss),
                num(est[2 * n]),
                num(se[2 * n]),
                num(est[2 * n + 1]),
                num(se[2 * n + 1]),
            ]);
        }
        let triples: Vec<(String, i32, f64)> =
            st.records.iter().zip(&st.tilde).map(|(r, d)| (r.county.clone(), r.year, *d)).collect();
        match fit_ar1(&st.name, &triples) {
            Ok(a) => ar1_rows.push(vec![
                a.state,
                num(a.rho0),
                num(a.rho1),
                num(a.std_error),
                num(a.ci95.0),
                num(a.ci95.1),
                a.pairs.to_string(),
                a.stationary.to_string(),
            ]),
            Err(e) => log::warn!("{}: AR-1 fit skipped: {e}", st.name),
        }
    }
    out.write_csv(
        "correlation_curves.csv",
        &[
            "state",
            "stocks",
            "corr",
            "corr_loess",
            "corr_se",
            "corr_lower",
            "corr_upper",
            "sd_price",
            "sd_price_loess",
            "sd_price_se",
            "sd_price_lower",
            "sd_price_upper",
            "corr_uncond",
            "corr_uncond_se",
            "sd_price_uncond",
            "sd_price_uncond_se",
        ],
        &rows,
    )?;
    out.write_csv("ar1.csv", &["state", "rho0", "rho1", "std_error", "ci_lower", "ci_upper", "pairs", "stationary"], &ar1_rows)
}

fn channel_model(cfg: &RunConfig, prep: &Prepared) -> Result<StockChannelModel> {
    let opts = ChannelOptions { iv_mode: cfg.iv_mode()?, ..ChannelOptions::default() };
    fit_stock_channels(&prep.stocks, &prep.market.feb_futures, &prep.market.implied_vol, &opts).stage("stock channels")
}

/// Trailing APH per county for `year`.
fn county_aph(st: &StateData, year: i32, window: i32) -> BTreeMap<String, f64> {
    let mut hist: BTreeMap<String, Vec<(i32, f64)>> = BTreeMap::new();
    for r in &st.records {
        hist.entry(r.county.clone()).or_default().push((r.year, r.value));
    }
    hist.into_iter().filter_map(|(c, h)| aph_yield(&h, year, window).map(|(m, _)| (c, m))).collect()
}

#[derive(Serialize)]
struct PremiumDiagnostics {
    state: String,
    aph: f64,
    iv_redraws: usize,
    iv_floored: usize,
    price_clamps: usize,
}

fn cmd_premium(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let prep = prepare(cfg)?;
    let scfg = sampler_config(cfg)?;
    let channels = channel_model(cfg, &prep)?;
    let r: usize = cfg.get("draws")?;
    let span: f64 = cfg.get("curve_span")?;
    let window: i32 = cfg.get("aph_window")?;
    let iv_scale: f64 = cfg.get("iv_scale")?;
    let psis = cfg.list("coverage")?.unwrap_or_default();
    let grid = prep.stock_grid(cfg.get("stock_points")?);
    let t = prep.time(prep.target_year);
    let mut rows = Vec::new();
    let mut diags = Vec::new();
    for (si, st) in prep.states.iter().enumerate() {
        let three = fit_conditional(&st.panel, &scfg).stage("three-channel fit")?;
        let two = fit_unconditional(&st.panel, &scfg).stage("two-channel fit")?;
        let aph = match cfg.opt_parse::<f64>("aph")? {
            Some(a) => a,
            None => {
                let a = county_aph(st, prep.target_year, window);
                if a.is_empty() {
                    return Err(CliError::Config(format!("{}: no yield history before {}", st.name, prep.target_year)));
                }
                a.values().sum::<f64>() / a.len() as f64
            }
        };
        let mut d = PremiumDiagnostics { state: st.name.clone(), aph, iv_redraws: 0, iv_floored: 0, price_clamps: 0 };
        for (pi, &psi) in psis.iter().enumerate() {
            let (mut p2, mut p3, mut e2, mut e3) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (k, &s) in grid.iter().enumerate() {
                let seed = derive_seed(cfg.seed(), "premium", ((si * psis.len() + pi) * grid.len() + k) as u64);
                let setup = |m| PremiumSetup {
                    channels: &channels,
                    yield_model: m,
                    price_trend: &prep.price_trend,
                    yield_trend: &st.trend,
                    t,
                    stocks: s,
                    coverage: psi,
                    aph,
                    iv_scale,
                };
                let a = simulate_premium(ModelKind::TwoChannel, &setup(&two), r, seed).stage("two-channel premium")?;
                let b = simulate_premium(ModelKind::ThreeChannel, &setup(&three), r, seed).stage("three-channel premium")?;
                for e in [&a, &b] {
                    d.iv_redraws += e.iv_redraws;
                    d.iv_floored += e.iv_floored;
                    d.price_clamps += e.price_clamps;
                }
                p2.push(a.premium);
                e2.push(a.std_error);
                p3.push(b.premium);
                e3.push(b.std_error);
            }
            let (s2, s3) = (smooth(&grid, &p2, span)?, smooth(&grid, &p3, span)?);
            for k in 0..grid.len() {
                rows.push(vec![
                    st.name.clone(),
                    num(psi),
                    num(grid[k]),
                    num(p2[k]),
                    num(e2[k]),
                    num(s2[k]),
                    num(p3[k]),
                    num(e3[k]),
                    num(s3[k]),
                ]);
            }
        }
        diags.push(d);
    }
    out.write_csv(
        "premiums.csv",
        &[
            "state",
            "coverage",
            "stocks",
            "premium_two",
            "premium_two_se",
            "premium_two_loess",
            "premium_three",
            "premium_three_se",
            "premium_three_loess",
        ],
        &rows,
    )?;
    out.write_json("premium.json", &json!({"target_year": prep.target_year, "draws": r, "states": diags}))
}

/// Policies read from a `policies` CSV, grouped by state and year.
fn read_policies(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<YearPolicies>>> {
    let path = cfg.path("policies")?;
    let err = |msg: String| CliError::Ingest { path: path.display().to_string(), msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| err(format!("missing column '{name}'")));
    let (cy, ci, c3, c2) = (need("year")?, need("indemnity")?, need("premium_three")?, need("premium_two")?);
    let cs = col("state");
    let mut groups: BTreeMap<String, BTreeMap<i32, YearPolicies>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| err(format!("line {line}: bad number in column {i}")))
        };
        let year: i32 = rec.get(cy).and_then(|v| v.parse().ok()).ok_or_else(|| err(format!("line {line}: bad year")))?;
        let state = cs.and_then(|i| rec.get(i)).unwrap_or("all").to_string();
        let yp = groups.entry(state).or_default().entry(year).or_insert_with(|| YearPolicies {
            year,
            indemnity: Vec::new(),
            premium_three: Vec::new(),
            premium_two: Vec::new(),
        });
        yp.indemnity.push(f(ci)?);
        yp.premium_three.push(f(c3)?);
        yp.premium_two.push(f(c2)?);
    }
    if groups.is_empty() {
        return Err(err("file holds no policies".into()));
    }
    Ok(groups.into_iter().map(|(s, m)| (s, m.into_values().collect())).collect())
}

/// Rates every county-year with an APH using in-sample models.
fn simulate_policies(cfg: &RunConfig, out: &mut Outputs) -> Result<BTreeMap<String, Vec<YearPolicies>>> {
    let prep = prepare(cfg)?;
    let scfg = sampler_config(cfg)?;
    let channels = channel_model(cfg, &prep)?;
    let r: usize = cfg.get("draws")?;
    let window: i32 = cfg.get("aph_window")?;
    let psi: f64 = cfg.get("rating_coverage")?;
    if psi > 1.0 {
        return Err(CliError::Config(format!("rating_coverage {psi} outside (0, 1]")));
    }
    let iv_scale: f64 = cfg.get("iv_scale")?;
    let start = cfg.opt_parse::<i32>("rating_start")?.unwrap_or(prep.first_year + window);
    let mut rows = Vec::new();
    let mut all = BTreeMap::new();
    let mut job = 0u64;
    for st in &prep.states {
        let three = fit_conditional(&st.panel, &scfg).stage("three-channel fit")?;
        let two = fit_unconditional(&st.panel, &scfg).stage("two-channel fit")?;
        let mut years = Vec::new();
        for (i, &year) in prep.market.years.iter().enumerate() {
            if year < start {
                continue;
            }
            let aph = county_aph(st, year, window);
            let mut yp = YearPolicies { year, indemnity: Vec::new(), premium_three: Vec::new(), premium_two: Vec::new() };
            for rec in st.records.iter().filter(|r| r.year == year) {
                let Some(&a) = aph.get(&rec.county) else { continue };
                let m = &prep.market;
                let loss = indemnity(psi, m.feb_futures[i], a, m.harvest_price[i], rec.value).stage("indemnity")?;
                let seed = derive_seed(cfg.seed(), "rating", job);
                job += 1;
                let setup = |model| PremiumSetup {
                    channels: &channels,
                    yield_model: model,
                    price_trend: &prep.price_trend,
                    yield_trend: &st.trend,
                    t: prep.times[i],
                    stocks: prep.stocks[i],
                    coverage: psi,
                    aph: a,
                    iv_scale,
                };
                let p3 = simulate_premium(ModelKind::ThreeChannel, &setup(&three), r, seed).stage("three-channel premium")?;
                let p2 = simulate_premium(ModelKind::TwoChannel, &setup(&two), r, seed).stage("two-channel premium")?;
                rows.push(vec![
                    st.name.clone(),
                    year.to_string(),
                    rec.county.clone(),
                    num(loss),
                    num(p3.premium),
                    num(p2.premium),
                ]);
                yp.indemnity.push(loss);
                yp.premium_three.push(p3.premium);
                yp.premium_two.push(p2.premium);
            }
            if !yp.indemnity.is_empty() {
                years.push(yp);
            }
        }
        all.insert(st.name.clone(), years);
    }
    out.write_csv("policies.csv", &["state", "year", "county", "indemnity", "premium_three", "premium_two"], &rows)?;
    Ok(all)
}

fn cmd_rating_game(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let groups = if cfg.raw("policies").is_some() { read_policies(cfg)? } else { simulate_policies(cfg, out)? };
    let reference = cfg.reference()?;
    let mut rows = Vec::new();
    let mut summary: BTreeMap<String, RatingGameResult> = BTreeMap::new();
    for (state, years) in groups {
        let res = rating_game(&years, reference).stage("rating game")?;
        for y in &res.years {
            rows.push(vec![state.clone(), y.year.to_string(), opt_num(y.d), y.ceded.to_string(), y.retained.to_string()]);
        }
        summary.insert(state, res);
    }
    out.write_csv("rating_years.csv", &["state", "year", "d", "ceded", "retained"], &rows)?;
    let brief: BTreeMap<_, _> = summary
        .iter()
        .map(|(s, r)| (s.clone(), json!({"d_star": r.d_star, "years": r.t, "excluded": r.excluded, "p_value": r.p_value})))
        .collect();
    out.write_json("rating_game.json", &json!({"reference": format!("{reference:?}"), "states": brief}))
}

fn cmd_simstudy(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let mut curve_rows = Vec::new();
    let mut mise_rows = Vec::new();
    let mut summary = BTreeMap::new();
    for mode in cfg.sim_modes()? {
        let mut sc = SimConfig {
            years: cfg.get("sim_years")?,
            counties: cfg.get("sim_counties")?,
            replicates: cfg.get("sim_replicates")?,
            draws: cfg.get("sim_draws")?,
            seed: cfg.seed(),
            price_mode: mode,
            ..SimConfig::default()
        };
        let base = sampler_config(cfg)?;
        sc.sampler = SamplerConfig { supports: sc.sampler.supports, ..base };
        let name = format!("{mode:?}").to_lowercase();
        info!("simstudy {name}: {} replicates", sc.replicates);
        let study = run_study(&sc).stage("simulation study")?;
        for rep in &study.replicates {
            for (k, tau) in sc.curve_taus.iter().enumerate() {
                for (i, s) in sc.curve_stocks.iter().enumerate() {
                    curve_rows.push(vec![
                        name.clone(),
                        rep.index.to_string(),
                        num(*tau),
                        num(*s),
                        num(rep.price_curves[k][i]),
                        num(sc.true_quantile_price(*tau, *s)),
                    ]);
                }
            }
            for (k, s) in sc.mise_stocks.iter().enumerate() {
                mise_rows.push(vec![name.clone(), rep.index.to_string(), num(*s), num(rep.mise[k])]);
            }
        }
        let mise: BTreeMap<String, f64> = sc.mise_stocks.iter().map(|s| num(*s)).zip(study.mise.iter().copied()).collect();
        let coverage: BTreeMap<String, f64> =
            sc.curve_taus.iter().map(|t| num(*t)).zip(study.coverage.iter().copied()).collect();
        summary.insert(name, json!({"replicates": sc.replicates, "mise": mise, "band_coverage": coverage}));
    }
    out.write_csv("sim_curves.csv", &["mode", "replicate", "tau", "stocks", "estimate", "truth"], &curve_rows)?;
    out.write_csv("sim_mise.csv", &["mode", "replicate", "stocks", "mise"], &mise_rows)?;
    out.write_json("sim_summary.json", &summary)
}
