//! CSV ingestion of the market series and county yield panel.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::Serialize;
use sqr_core::trend::{MarketSeries, YieldPanel, YieldRecord};

use crate::error::{CliError, Result};

const MARKET_COLUMNS: [&str; 7] =
    ["year", "harvest_price", "feb_futures", "implied_vol", "stocks", "national_production", "gdp_deflator"];
const YIELD_COLUMNS: [&str; 4] = ["year", "state", "county", "yield"];

fn ingest_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Ingest { path: path.display().to_string(), msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| ingest_err(path, e.to_string()))
}

fn column_index(path: &Path, headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| headers.iter().position(|h| h == *w).ok_or_else(|| ingest_err(path, format!("missing column '{w}'"))))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| ingest_err(path, format!("line {line}: missing field '{name}'")))?;
    raw.parse().map_err(|_| ingest_err(path, format!("line {line}: cannot parse {name} '{raw}'")))
}

pub fn ingest_market(path: &Path) -> Result<MarketSeries> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| ingest_err(path, e.to_string()))?.clone();
    let idx = column_index(path, &headers, &MARKET_COLUMNS)?;
    let mut rows: Vec<(i32, [f64; 6])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest_err(path, e.to_string()))?;
        let year: i32 = field(path, &rec, idx[0], "year")?;
        let mut v = [0.0; 6];
        for k in 0..6 {
            v[k] = field(path, &rec, idx[k + 1], MARKET_COLUMNS[k + 1])?;
        }
        rows.push((year, v));
    }
    if rows.is_empty() {
        return Err(ingest_err(path, "file holds no data rows"));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(ingest_err(path, format!("duplicate year {}", w[0].0)));
    }
    let col = |k: usize| rows.iter().map(|r| r.1[k]).collect::<Vec<f64>>();
    let series = MarketSeries::new(rows.iter().map(|r| r.0).collect(), col(0), col(1), col(2), col(3), col(4), col(5))
        .map_err(|e| ingest_err(path, e.to_string()))?;
    let gaps = series.gaps();
    if !gaps.is_empty() {
        warn!("{}: missing years {gaps:?}", path.display());
    }
    Ok(series)
}

pub fn ingest_yields(path: &Path) -> Result<YieldPanel> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| ingest_err(path, e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(ingest_err(path, "empty file"));
    }
    let idx = column_index(path, &headers, &YIELD_COLUMNS)?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ingest_err(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let value: f64 = field(path, &rec, idx[3], "yield")?;
        if !(value >= 0.0 && value.is_finite()) {
            return Err(ingest_err(path, format!("line {line}: yield must be non-negative, got {value}")));
        }
        let state: String = field(path, &rec, idx[1], "state")?;
        let county: String = field(path, &rec, idx[2], "county")?;
        if state.is_empty() || county.is_empty() {
            return Err(ingest_err(path, format!("line {line}: empty state or county")));
        }
        records.push(YieldRecord { year: field(path, &rec, idx[0], "year")?, state, county, value });
    }
    if records.is_empty() {
        return Err(ingest_err(path, "file holds no data rows"));
    }
    YieldPanel::new(records).map_err(|e| ingest_err(path, e.to_string()))
}

/// Per-decade means in the layout of a summary-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecadeSummary {
    pub decade: i32,
    pub years: usize,
    pub harvest_price: f64,
    pub feb_futures: f64,
    pub implied_vol: f64,
    pub stocks: f64,
}

pub fn decade_summary(series: &MarketSeries) -> Vec<DecadeSummary> {
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, y) in series.years.iter().enumerate() {
        groups.entry(y.div_euclid(10) * 10).or_default().push(i);
    }
    let mean = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
    groups
        .into_iter()
        .map(|(decade, idx)| DecadeSummary {
            decade,
            years: idx.len(),
            harvest_price: mean(&series.harvest_price, &idx),
            feb_futures: mean(&series.feb_futures, &idx),
            implied_vol: mean(&series.implied_vol, &idx),
            stocks: mean(&series.stocks, &idx),
        })
        .collect()
}

/// Observation counts per state and year.
pub fn state_counts(panel: &YieldPanel) -> BTreeMap<String, BTreeMap<i32, usize>> {
    panel.states().into_iter().map(|s| {
        let counts = panel.for_state(&s).counts_by_year();
        (s, counts)
    }).collect()
}
