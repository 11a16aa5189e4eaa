use std::collections::{BTreeMap, HashSet};

use super::TrendError;

/// National yearly market series.
///
/// `national_production` is total production in the same units as `stocks`
/// (million bushels), so that stocks divided by smoothed production is
/// dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    pub years: Vec<i32>,
    pub harvest_price: Vec<f64>,
    pub feb_futures: Vec<f64>,
    pub implied_vol: Vec<f64>,
    pub stocks: Vec<f64>,
    pub national_production: Vec<f64>,
    pub gdp_deflator: Vec<f64>,
}

impl MarketSeries {
    pub fn new(
        years: Vec<i32>,
        harvest_price: Vec<f64>,
        feb_futures: Vec<f64>,
        implied_vol: Vec<f64>,
        stocks: Vec<f64>,
        national_production: Vec<f64>,
        gdp_deflator: Vec<f64>,
    ) -> Result<Self, TrendError> {
        let n = years.len();
        if n == 0 {
            return Err(TrendError::Invalid("market series is empty".into()));
        }
        let cols: [(&str, &Vec<f64>); 6] = [
            ("harvest_price", &harvest_price),
            ("feb_futures", &feb_futures),
            ("implied_vol", &implied_vol),
            ("stocks", &stocks),
            ("national_production", &national_production),
            ("gdp_deflator", &gdp_deflator),
        ];
        for (name, col) in cols {
            if col.len() != n {
                return Err(TrendError::Invalid(format!("column {name} has {} values for {n} years", col.len())));
            }
            if let Some(i) = col.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(TrendError::Invalid(format!("{name} must be positive, got {} in {}", col[i], years[i])));
            }
        }
        if let Some(w) = years.windows(2).find(|w| w[1] <= w[0]) {
            return Err(TrendError::Invalid(format!("years must increase strictly ({} then {})", w[0], w[1])));
        }
        Ok(Self { years, harvest_price, feb_futures, implied_vol, stocks, national_production, gdp_deflator })
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    /// Years missing between the first and last year.
    pub fn gaps(&self) -> Vec<i32> {
        self.years.windows(2).flat_map(|w| (w[0] + 1)..w[1]).collect()
    }

    /// Restrict to the given years (which must all be present).
    pub fn subset(&self, years: &[i32]) -> Result<Self, TrendError> {
        let idx: Vec<usize> = years
            .iter()
            .map(|y| self.index_of(*y).ok_or(TrendError::MissingYear(*y)))
            .collect::<Result<_, _>>()?;
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::new(
            years.to_vec(),
            pick(&self.harvest_price),
            pick(&self.feb_futures),
            pick(&self.implied_vol),
            pick(&self.stocks),
            pick(&self.national_production),
            pick(&self.gdp_deflator),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YieldRecord {
    pub year: i32,
    pub state: String,
    pub county: String,
    pub value: f64,
}

/// County-level yields. Counties are identified by `(state, county)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct YieldPanel {
    records: Vec<YieldRecord>,
}

impl YieldPanel {
    pub fn new(records: Vec<YieldRecord>) -> Result<Self, TrendError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !(r.value.is_finite() && r.value >= 0.0) {
                return Err(TrendError::Invalid(format!(
                    "yield must be non-negative, got {} for {}/{} in {}",
                    r.value, r.state, r.county, r.year
                )));
            }
            if !seen.insert((r.year, r.state.as_str(), r.county.as_str())) {
                return Err(TrendError::Invalid(format!(
                    "duplicate record for {}/{} in {}",
                    r.state, r.county, r.year
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[YieldRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct state labels.
    pub fn states(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.state.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn for_state(&self, state: &str) -> YieldPanel {
        YieldPanel { records: self.records.iter().filter(|r| r.state == state).cloned().collect() }
    }

    /// Records per year (n_t).
    pub fn counts_by_year(&self) -> BTreeMap<i32, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.year).or_insert(0) += 1;
        }
        m
    }

    /// Sorted distinct years.
    pub fn years(&self) -> Vec<i32> {
        self.counts_by_year().into_keys().collect()
    }
}
