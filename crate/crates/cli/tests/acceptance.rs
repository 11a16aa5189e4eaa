//! Acceptance criteria, one pass/fail line each. Runs as a plain binary
//! (`harness = false`) so the lines always print.
//!
//! Set `SQR_ACCEPTANCE_FULL=1` to run the simulation study at M = 100
//! against the unscaled MISE thresholds instead of the M = 10 smoke run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use sqr_cli::{run, RunConfig};
use sqr_core::bspline::{BSplineBasis, DifferenceMatrix, KnotPlacement};
use sqr_core::joint_sampler::{
    fit_conditional, interpolate_tau, sample, supports, DetrendedPanel, SamplerConfig, SupportMode,
};
use sqr_core::premium::{binomial_upper_tail, indemnity};
use sqr_core::quantile_fit::{fit_pqr, objective, Design, SolverOptions};
use sqr_core::rng::{named_stream, std_normal, substream};
use sqr_core::simstudy::{skew_normal_draw, band_coverage, draw_stocks, generate_panel, linspace, run_price_replicate, PriceMode, SimConfig};
use sqr_core::stats::{jackknife, jackknife_groups, jackknife_variance, moments, GroupScheme};
use sqr_core::trend::{detrend, fit_trend, retrend_value, detrend_value, DetrendMode, TrendOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 simulation-study MISE", mise),
        ("2 quantile recovery band coverage", recovery),
        ("3 binomial p-value vocabulary", binomial_vocabulary),
        ("4 check-loss oracle", check_loss_oracle),
        ("5 skew-normal standardization", skew_normal),
        ("6 inverse-transform self-consistency", inverse_transform),
        ("7 synthetic correlation proxy", correlation_proxy),
        ("8 property suites", properties),
    ];
    // SQR_ACCEPTANCE_ONLY=1,7 runs a subset.
    let only: Option<Vec<String>> =
        std::env::var("SQR_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|x| x.trim().to_string()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        let id = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = std::panic::catch_unwind(f).unwrap_or_else(|_| outcome(false, "panicked"));
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn mise() -> Outcome {
    let full = std::env::var("SQR_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let (m, scale) = if full { (100, 1.0) } else { (10, 5.0) };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&format!("sim_mode = both\nsim_replicates = {m}\n"), tmp.path()).unwrap();
    let out = tmp.path().join("out");
    if let Err(e) = run("simstudy", &cfg, &out, None) {
        return outcome(false, format!("simstudy failed: {e}"));
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("sim_summary.json")).unwrap()).unwrap();
    let limits = [("0.093", 1e-5), ("0.173", 1e-5), ("0.281", 2e-4)];
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in ["linear", "nonlinear"] {
        for (s, limit) in limits {
            let v = summary[mode]["mise"][s].as_f64().unwrap_or(f64::INFINITY);
            pass &= v <= scale * limit;
            parts.push(format!("{mode} s={s} {v:.3e} (<= {:.0e})", scale * limit));
        }
    }
    outcome(pass, format!("M={m}: {}", parts.join(", ")))
}

fn recovery() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in [PriceMode::Linear, PriceMode::Nonlinear] {
        let cfg = SimConfig { price_mode: mode, ..SimConfig::default() };
        let curves: Vec<_> = (0..100).map(|m| run_price_replicate(&cfg, m).unwrap()).collect();
        let cov = band_coverage(&cfg, &curves);
        pass &= cov.iter().all(|c| *c >= 0.9);
        parts.push(format!("{mode:?} {cov:?}"));
    }
    outcome(pass, format!("M=100, share of 50 stock points inside the band per tau (>= 0.9): {}", parts.join("; ")))
}

fn binomial_vocabulary() -> Outcome {
    let vocab = [0.0121, 0.0680, 0.2291, 0.3555, 0.5000, 0.6445, 0.7709, 0.8675, 0.9320, 0.9693, 0.9879, 0.9997, 0.9999];
    let tails: Vec<f64> = (0..=29).map(|k| binomial_upper_tail(29, k)).collect();
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    for v in vocab {
        let best = tails.iter().map(|t| (t - v).abs()).fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
        if best > 5e-4 {
            missing.push(v);
        }
    }
    outcome(missing.is_empty(), format!("13 values, worst gap {worst:.2e} (<= 5e-4), unmatched {missing:?}"))
}

fn check_loss_oracle() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/qr_oracle.json");
    let cases: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let f = |v: &serde_json::Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let mut worst: f64 = 0.0;
    for c in &cases {
        let (n, p) = (c["n"].as_u64().unwrap() as usize, c["p"].as_u64().unwrap() as usize);
        let (tau, lambda) = (c["tau"].as_f64().unwrap(), c["lambda"].as_f64().unwrap());
        let design = Design::from_row_major(n, p, f(&c["x"])).unwrap();
        let y = f(&c["y"]);
        let pen = DifferenceMatrix::new(c["penalty_order"].as_u64().unwrap() as usize, p).unwrap().penalty();
        let fit = fit_pqr(&design, &y, tau, lambda, &pen, &SolverOptions::default()).unwrap();
        let (loss, penalty) = objective(&design, &y, tau, lambda, &pen, &fit.coefficients);
        let oracle = c["objective"].as_f64().unwrap();
        worst = worst.max((loss + penalty - oracle).abs() / oracle.abs().max(1e-12));
    }
    outcome(worst <= 1e-6, format!("{} instances, worst relative gap {worst:.2e} (<= 1e-6)", cases.len()))
}

fn skew_normal() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in [3.0, -3.0] {
        let mut rng = substream(2024, if alpha > 0.0 { 1 } else { 2 });
        let x: Vec<f64> = (0..1_000_000).map(|_| skew_normal_draw(alpha, &mut rng)).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let skew = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n / var.powf(1.5);
        pass &= mean.abs() < 0.01 && (var.sqrt() - 1.0).abs() < 0.01 && skew.signum() == alpha.signum();
        parts.push(format!("alpha={alpha}: mean {mean:.4}, sd {:.4}, skewness {skew:.3}", var.sqrt()));
    }
    outcome(pass, parts.join("; "))
}

fn inverse_transform() -> Outcome {
    let cfg = SimConfig { years: 100, counties: 5, ..SimConfig::default() };
    let panel = generate_panel(&cfg, &mut substream(77, 0)).unwrap().to_detrended().unwrap();
    let model = fit_conditional(&panel, &cfg.sampler).unwrap();
    let s = 0.133;
    let n = 100_000;
    let draws = sample(&model, s, n, 4242).unwrap();
    let q = model.price_quantiles(s).unwrap();
    let (lo, hi) = model.tau_clamp;
    // CDF of Q(U), U ~ U[lo, hi], with Q the interpolated quantile curve.
    let cdf = |x: f64| {
        if x < interpolate_tau(&model.tau_grid, &q, lo) {
            return 0.0;
        }
        if x >= interpolate_tau(&model.tau_grid, &q, hi) {
            return 1.0;
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if interpolate_tau(&model.tau_grid, &q, m) <= x {
                a = m;
            } else {
                b = m;
            }
        }
        (a - lo) / (hi - lo)
    };
    let mut p = draws.price.clone();
    p.sort_by(f64::total_cmp);
    let ks = p
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    outcome(ks < 0.01, format!("{n} draws at stocks {s}: KS {ks:.4} (< 0.01)"))
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    moments(&ra, &rb).unwrap().corr
}

const BETA: f64 = -40.0;
const SIGMA_E: f64 = 10.0;

fn sigma_price(s: f64) -> f64 {
    0.02 + 2.0 * (0.25 - s).max(0.0)
}

fn true_corr(s: f64) -> f64 {
    let b = BETA * sigma_price(s);
    b / (b * b + SIGMA_E * SIGMA_E).sqrt()
}

fn correlation_proxy() -> Outcome {
    let (years, counties, b, r) = (100, 20, 50, 5000);
    let mut rng = named_stream(31, "proxy", 0);
    let stocks = draw_stocks(&SimConfig::default(), years, &mut rng).unwrap();
    let times: Vec<f64> = (1..=years).map(|t| t as f64).collect();
    let mut log_price = Vec::new();
    let (mut rec_t, mut rec_y, mut obs_year, mut keys) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..years {
        let p = sigma_price(stocks[t]) * std_normal(&mut rng);
        log_price.push(1.0 + 0.008 * times[t] + p);
        for c in 0..counties {
            rec_t.push(times[t]);
            rec_y.push(100.0 + 1.2 * times[t] + BETA * p + SIGMA_E * std_normal(&mut rng));
            obs_year.push(t);
            keys.push((format!("c{c:02}"), 1900 + t as i32));
        }
    }
    // Trend stage on the level series, then the quantile pipeline.
    let opts = TrendOptions::default();
    let price_trend = fit_trend(&times, &log_price, &opts).unwrap();
    let levels: Vec<f64> = log_price.iter().map(|v| v.exp()).collect();
    let price = detrend(&levels, &times, &price_trend, DetrendMode::LogPrice).unwrap();
    let yield_trend = fit_trend(&rec_t, &rec_y, &opts).unwrap();
    let yields = detrend(&rec_y, &rec_t, &yield_trend, DetrendMode::LevelYield).unwrap();
    let years_v: Vec<i32> = (0..years as i32).map(|t| 1900 + t).collect();
    let panel = DetrendedPanel::new(years_v, price, stocks, obs_year, yields).unwrap();

    let base = SamplerConfig::default();
    let (ps, ss) = supports(&panel, base.supports).unwrap();
    let cfg = SamplerConfig { supports: SupportMode::Fixed { price: ps, stocks: ss }, ..base };
    let grid = linspace(0.08, 0.2, 20);
    let estimate = |panel: &DetrendedPanel| -> sqr_core::Result<Vec<f64>> {
        let model = fit_conditional(panel, &cfg)?;
        grid.iter()
            .enumerate()
            .map(|(k, &s)| {
                let d = sample(&model, s, r, 900 + k as u64)?;
                Ok(moments(&d.price, &d.yields)?.corr)
            })
            .collect()
    };
    let est = estimate(&panel).unwrap();
    let groups = jackknife_groups(&keys, b, GroupScheme::RoundRobin).unwrap();
    let jk = jackknife(&groups, b, |keep| estimate(&panel.subset(keep)?)).unwrap();
    let truth: Vec<f64> = grid.iter().map(|&s| true_corr(s)).collect();
    let rho = spearman(&truth, &est);
    let covered = (0..grid.len())
        .filter(|&k| (est[k] - truth[k]).abs() <= 1.96 * jk.variance[k].sqrt())
        .count() as f64
        / grid.len() as f64;
    outcome(
        rho > 0.8 && covered >= 0.8,
        format!(
            "T={years}, {counties} counties, B={b}: Spearman {rho:.3} (> 0.8), band coverage {covered:.2} (>= 0.8), truth {:.3}..{:.3}, estimate {:.3}..{:.3}",
            truth[0], truth[grid.len() - 1], est[0], est[grid.len() - 1]
        ),
    )
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn properties() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = substream(8, 0);

    // Partition of unity.
    let obs: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let mut worst: f64 = 0.0;
    for placement in [KnotPlacement::EquallySpaced, KnotPlacement::Quantile] {
        let basis = BSplineBasis::new(&obs, 6, 3, (0.0, 1.0), placement).unwrap();
        for _ in 0..1000 {
            let x = rng.random::<f64>();
            worst = worst.max((basis.eval(x).unwrap().iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst >= 1e-12 {
        failures.push(format!("partition of unity off by {worst:.1e}"));
    }

    // Detrend and retrend are inverse.
    for _ in 0..1000 {
        let (x, trend) = (5.0 * rng.random::<f64>() + 0.01, std_normal(&mut rng));
        for mode in [DetrendMode::LogPrice, DetrendMode::LevelYield] {
            let back = retrend_value(detrend_value(x, trend, mode).unwrap(), trend, mode);
            if (back - x).abs() > 1e-12 * x.abs().max(1.0) {
                failures.push(format!("retrend({mode:?}) returned {back} for {x}"));
            }
        }
    }

    // Indemnity convex and non-increasing in revenue on a grid.
    let rev: Vec<f64> = linspace(1.0, 1200.0, 400);
    let ind: Vec<f64> = rev.iter().map(|&r| indemnity(0.75, 4.0, 180.0, r, 1.0).unwrap()).collect();
    for k in 1..rev.len() - 1 {
        let chord = 0.5 * (ind[k - 1] + ind[k + 1]);
        if ind[k] > chord + 1e-9 || ind[k] > ind[k - 1] {
            failures.push(format!("indemnity not convex/decreasing at revenue {}", rev[k]));
            break;
        }
    }

    // Jackknife variance non-negative, partitioning deterministic.
    for _ in 0..200 {
        let v: Vec<f64> = (0..10).map(|_| std_normal(&mut rng)).collect();
        if jackknife_variance(&v) < 0.0 {
            failures.push("negative jackknife variance".into());
        }
    }
    let keys: Vec<(String, i32)> = (0..300).map(|i| (format!("c{}", i % 17), 1980 + (i / 17) as i32)).collect();
    for scheme in [GroupScheme::RoundRobin, GroupScheme::WholeCounty] {
        let a = jackknife_groups(&keys, 7, scheme).unwrap();
        let mut rev_keys = keys.clone();
        rev_keys.reverse();
        let mut b = jackknife_groups(&rev_keys, 7, scheme).unwrap();
        b.reverse();
        if a != b || (0..7).any(|g| !a.contains(&g)) {
            failures.push(format!("{scheme:?} grouping depends on input order or leaves a group empty"));
        }
    }

    // Premium monotone in coverage, then manifest replay.
    let tmp = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(fixtures().join("small.cfg")).unwrap();
    let text: String = base
        .lines()
        .filter(|l| !l.starts_with("coverage") && !l.starts_with("stock_points"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = RunConfig::parse(&format!("{text}coverage = 0.55,0.65,0.75,0.85,0.95\nstock_points = 5\n"), &fixtures()).unwrap();
    let prem = tmp.path().join("premium");
    run("premium", &cfg, &prem, None).unwrap();
    let csv = fs::read_to_string(prem.join("premiums.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (cs, cst, cc, c2, c3) = (col("state"), col("stocks"), col("coverage"), col("premium_two"), col("premium_three"));
    let mut rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    rows.sort_by(|a, b| {
        (&a[cs], a[cst].parse::<f64>().unwrap(), a[cc].parse::<f64>().unwrap())
            .partial_cmp(&(&b[cs], b[cst].parse::<f64>().unwrap(), b[cc].parse::<f64>().unwrap()))
            .unwrap()
    });
    for w in rows.windows(2) {
        if w[0][cs] == w[1][cs] && w[0][cst] == w[1][cst] {
            for c in [c2, c3] {
                if w[1][c].parse::<f64>().unwrap() < w[0][c].parse::<f64>().unwrap() {
                    failures.push(format!("premium falls with coverage: {:?} -> {:?}", w[0], w[1]));
                }
            }
        }
    }

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run("sample", &cfg, &a, None).unwrap();
    let replay = RunConfig::load(&a.join("config.resolved")).unwrap();
    run("sample", &replay, &b, None).unwrap();
    for f in ["draws.csv", "sample.json", "manifest.json"] {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            failures.push(format!("replay changed {f}"));
        }
    }

    let detail = if failures.is_empty() {
        "partition of unity, retrend inverse, indemnity convexity, premium monotone in coverage, jackknife \
         variance and grouping, manifest replay"
            .to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}
