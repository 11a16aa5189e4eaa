use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sqr_cli::ingest::{decade_summary, ingest_market, ingest_yields, state_counts};
use sqr_cli::{run, CliError, RunConfig};
use sqr_core::rng::{std_normal, substream};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn fixture_config(extra: &str) -> RunConfig {
    let keys: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let base: String = fs::read_to_string(fixtures().join("small.cfg"))
        .unwrap()
        .lines()
        .filter(|l| !keys.contains(&l.split('=').next().unwrap_or("").trim()))
        .map(|l| format!("{l}\n"))
        .collect();
    RunConfig::parse(&format!("{base}{extra}"), &fixtures()).unwrap()
}

fn sqr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sqr")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn market_fixture_summary() {
    let m = ingest_market(&fixtures().join("market.csv")).unwrap();
    assert_eq!(m.len(), 29);
    assert_eq!((m.years[0], m.years[28]), (1990, 2018));
    assert!(m.gaps().is_empty());
    let d = decade_summary(&m);
    assert_eq!(d[0].decade, 1990);
    assert_eq!(d[0].years, 10);
    assert_eq!(d[0].stocks, 1327.0);
}

const MARKET_HEADER: &str = "year,harvest_price,feb_futures,implied_vol,stocks,national_production,gdp_deflator\n";

#[test]
fn market_rejections() {
    let tmp = tempfile::tempdir().unwrap();
    let dup = write(
        tmp.path(),
        "dup.csv",
        &format!("{MARKET_HEADER}2000,2,2,0.2,1000,9000,0.8\n2001,2,2,0.2,1000,9000,0.8\n2000,2,2,0.2,1000,9000,0.8\n"),
    );
    let e = ingest_market(&dup).unwrap_err();
    assert!(matches!(&e, CliError::Ingest { msg, .. } if msg.contains("duplicate year 2000")), "{e}");

    let missing = write(tmp.path(), "missing.csv", "year,harvest_price\n2000,2\n");
    let e = ingest_market(&missing).unwrap_err();
    assert!(e.to_string().contains("missing column 'feb_futures'"), "{e}");

    let neg = write(tmp.path(), "neg.csv", &format!("{MARKET_HEADER}2000,-2,2,0.2,1000,9000,0.8\n"));
    assert!(ingest_market(&neg).is_err());
}

#[test]
fn yield_ingest_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = write(tmp.path(), "empty.csv", "");
    assert!(matches!(ingest_yields(&empty), Err(CliError::Ingest { .. })));

    let mut body = String::from("year,state,county,yield\n");
    for y in 2000..2005 {
        for c in ["a", "b", "c"] {
            body.push_str(&format!("{y},IL,{c},150\n"));
        }
    }
    let one = write(tmp.path(), "one.csv", &body);
    assert_eq!(ingest_yields(&one).unwrap().len(), 15);

    body.push_str("2000,IA,x,160\n2001,IA,x,161\n2001,IA,y,162\n");
    let mixed = ingest_yields(&write(tmp.path(), "mixed.csv", &body)).unwrap();
    let counts = state_counts(&mixed);
    assert_eq!(counts["IL"].values().sum::<usize>(), 15);
    assert_eq!(counts["IA"][&2000], 1);
    assert_eq!(counts["IA"][&2001], 2);

    let bad = write(tmp.path(), "bad.csv", "year,state,county,yield\n2000,IL,a,150\n2001,IL,a,oops\n");
    let e = ingest_yields(&bad).unwrap_err();
    assert!(e.to_string().contains("line 3"), "{e}");
    let neg = write(tmp.path(), "neg.csv", "year,state,county,yield\n2000,IL,a,-1\n");
    let e = ingest_yields(&neg).unwrap_err();
    assert!(e.to_string().contains("line 2") && e.to_string().contains("non-negative"), "{e}");
}

#[test]
fn exit_codes_and_cleanup() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write(tmp.path(), "bad.cfg", "sed = 3\n");
    let out = tmp.path().join("o1");
    let o = sqr(&["fit", "--config", bad_key.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'sed'"));
    assert!(!out.exists());

    let missing = write(tmp.path(), "missing.cfg", "market = nowhere.csv\nyields = nowhere.csv\n");
    let o = sqr(&["detrend", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());

    // More jackknife groups than records fails after the earlier stages ran.
    let cfg = fixtures().join("small.cfg");
    let text = fs::read_to_string(&cfg).unwrap().replace("jackknife_groups = 8", "jackknife_groups = 5000");
    let numeric = write(tmp.path(), "numeric.cfg", &text.replace("market.csv", fixtures().join("market.csv").to_str().unwrap()).replace("yields.csv", fixtures().join("yields.csv").to_str().unwrap()));
    let o = sqr(&["correlate", "--config", numeric.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("jackknife groups"));
    assert!(!out.exists());

    let ok = sqr(&["detrend", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(out.join("manifest.json").exists());
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn runs_are_byte_identical_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config("draws = 300");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let inputs = [read(&fixtures(), "market.csv"), read(&fixtures(), "yields.csv")];
    let ma = run("sample", &cfg, &a, None).unwrap();
    let mb = run("sample", &cfg, &b, None).unwrap();
    assert_eq!(read(&a, "draws.csv"), read(&b, "draws.csv"));
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.config_hash, cfg.hash());

    // Replay from the resolved config written next to the outputs.
    let replay = RunConfig::load(&a.join("config.resolved")).unwrap();
    assert_eq!(replay.hash(), cfg.hash());
    let c = tmp.path().join("c");
    run("sample", &replay, &c, None).unwrap();
    assert_eq!(read(&a, "draws.csv"), read(&c, "draws.csv"));
    assert_eq!(read(&a, "manifest.json"), read(&c, "manifest.json"));

    let mut other = cfg.clone();
    other.set_seed(12);
    let d = tmp.path().join("d");
    run("sample", &other, &d, None).unwrap();
    assert_ne!(read(&a, "draws.csv"), read(&d, "draws.csv"));

    assert_eq!(inputs, [read(&fixtures(), "market.csv"), read(&fixtures(), "yields.csv")]);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("small.cfg");
    let mut outs = Vec::new();
    for w in ["1", "3"] {
        let out = tmp.path().join(w);
        let o = sqr(&["sample", "--config", cfg.to_str().unwrap(), "--workers", w, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        outs.push(read(&out, "draws.csv"));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn data_subcommands_write_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config("");
    let cases: [(&str, &[&str]); 5] = [
        ("detrend", &["market_detrended.csv", "yields_detrended.csv", "trends.json", "ingest.json"]),
        ("fit", &["price_quantiles.csv", "yield_quantiles.csv", "fit.json"]),
        ("correlate", &["correlation_curves.csv", "ar1.csv"]),
        ("premium", &["premiums.csv", "premium.json"]),
        ("rating-game", &["policies.csv", "rating_years.csv", "rating_game.json"]),
    ];
    for (cmd, files) in cases {
        let out = tmp.path().join(cmd);
        let m = run(cmd, &cfg, &out, Some(1)).unwrap();
        for f in files {
            assert!(out.join(f).exists(), "{cmd}: {f}");
            assert!(m.outputs.iter().any(|o| o.file == *f));
        }
    }
    let text = fs::read_to_string(tmp.path().join("fit/price_quantiles.csv")).unwrap();
    assert!(text.starts_with("state,stocks,tau,quantile,quantile_loess\n"));
    // 2 states x 5 taus x 8 stock points.
    assert_eq!(text.lines().count(), 1 + 2 * 5 * 8);
    let curves = fs::read_to_string(tmp.path().join("correlate/correlation_curves.csv")).unwrap();
    for line in curves.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!((-1.0..=1.0).contains(&v[0]) && v[2] >= 0.0 && v[5] > 0.0, "{line}");
    }
    let prem = fs::read_to_string(tmp.path().join("premium/premiums.csv")).unwrap();
    for line in prem.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v[2] >= 0.0 && v[5] >= 0.0, "{line}");
    }
}

#[test]
fn premium_increases_with_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config("coverage = 0.6,0.75,0.9\nstock_points = 4\ndraws = 4000\nstates = NE");
    run("premium", &cfg, tmp.path(), None).unwrap();
    let text = fs::read_to_string(tmp.path().join("premiums.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect()).collect();
    // Common random numbers across coverage levels at each stocks value.
    for k in 0..4 {
        let at: Vec<&Vec<f64>> = rows.iter().filter(|r| r[1] == rows[k][1]).collect();
        assert_eq!(at.len(), 3);
        assert!(at[0][2] <= at[1][2] && at[1][2] <= at[2][2]);
        assert!(at[0][5] <= at[1][5] && at[1][5] <= at[2][5]);
    }
}

#[test]
fn rating_game_from_policy_file() {
    let tmp = tempfile::tempdir().unwrap();
    // Year 1: method-three rates exceed the reference on policies with high
    // losses, so ceded LR > retained LR and D > 1. Year 2: the reverse.
    // Year 3: nothing ceded, so D is undefined.
    let body = "year,indemnity,premium_three,premium_two\n\
                2001,10,6,5\n2001,0,4,5\n2001,1,6,5\n2001,0,4,5\n\
                2002,0,6,5\n2002,10,4,5\n2002,0,6,5\n2002,1,4,5\n\
                2003,3,4,5\n2003,0,4,5\n";
    let pol = write(tmp.path(), "pol.csv", body);
    let cfg = RunConfig::parse(&format!("policies = {}\n", pol.display()), tmp.path()).unwrap();
    let out = tmp.path().join("out");
    run("rating-game", &cfg, &out, None).unwrap();
    let years = fs::read_to_string(out.join("rating_years.csv")).unwrap();
    let lines: Vec<&str> = years.lines().collect();
    assert_eq!(lines[1], "all,2001,inf,2,2");
    assert_eq!(lines[2], "all,2002,0,2,2");
    assert_eq!(lines[3], "all,2003,,0,2");
    let summary: serde_json::Value = serde_json::from_slice(&read(&out, "rating_game.json")).unwrap();
    let all = &summary["states"]["all"];
    assert_eq!(all["d_star"], 1);
    assert_eq!(all["years"], 2);
    assert_eq!(all["excluded"], 1);
    assert_eq!(all["p_value"], 0.75);
}

/// Panel whose price and yield ignore stocks entirely.
fn null_fixture(dir: &Path) -> RunConfig {
    let mut rng = substream(99, 0);
    let mut market = String::from(MARKET_HEADER);
    let mut yields = String::from("year,state,county,yield\n");
    for (i, y) in (1980..2020).enumerate() {
        let z = std_normal(&mut rng);
        let p = (1.0 + 0.01 * i as f64 + 0.2 * z).exp();
        let stocks = 900.0 + 600.0 * rand_like(&mut rng);
        market.push_str(&format!("{y},{p},{p},0.2,{stocks},{},0.9\n", 9000 + 50 * i));
        for c in 0..10 {
            let v = 120.0 + 1.5 * i as f64 - 15.0 * z + 8.0 * std_normal(&mut rng);
            yields.push_str(&format!("{y},ST,c{c},{v}\n"));
        }
    }
    write(dir, "market.csv", &market);
    write(dir, "yields.csv", &yields);
    RunConfig::parse(
        "market = market.csv\nyields = yields.csv\ndraws = 2000\nstock_points = 6\njackknife_groups = 10\nseed = 5\n",
        dir,
    )
    .unwrap()
}

fn rand_like(rng: &mut sqr_core::rng::Rng) -> f64 {
    let z = std_normal(rng);
    0.5 * (1.0 + (z / 2f64.sqrt()).tanh())
}

#[test]
fn null_stocks_effect_gives_overlapping_bands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = null_fixture(tmp.path());
    let out = tmp.path().join("out");
    run("correlate", &cfg, &out, None).unwrap();
    let text = fs::read_to_string(out.join("correlation_curves.csv")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        let (c, se, cu, seu) = (v[0], v[2], v[10], v[11]);
        let (lo, hi) = (c - 1.96 * se, c + 1.96 * se);
        let (ulo, uhi) = (cu - 1.96 * seu, cu + 1.96 * seu);
        assert!(lo <= uhi && ulo <= hi, "{line}");
    }
}

#[test]
fn simstudy_small_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        "sim_mode = linear\nsim_years = 40\nsim_counties = 20\nsim_replicates = 2\nsim_draws = 500\n\
         lambda_price = 1\nlambda_yield = 1\n",
        tmp.path(),
    )
    .unwrap();
    let out = tmp.path().join("out");
    run("simstudy", &cfg, &out, None).unwrap();
    let s: serde_json::Value = serde_json::from_slice(&read(&out, "sim_summary.json")).unwrap();
    assert_eq!(s["linear"]["replicates"], 2);
    assert!(s["linear"]["mise"]["0.173"].as_f64().unwrap() >= 0.0);
    let curves = fs::read_to_string(out.join("sim_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 5 * 50);
}
