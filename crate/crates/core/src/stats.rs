//! Moments of joint draws, delete-a-group jackknife and the AR-1 yield
//! autocorrelation model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::joint_sampler::JointDraws;
use crate::trend::loess_smooth;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub corr: f64,
    pub sd_price: f64,
    pub sd_yield: f64,
    pub mean_price: f64,
    pub mean_yield: f64,
}

/// Sample moments of paired values (n - 1 divisors).
pub fn moments(price: &[f64], yields: &[f64]) -> Result<Moments> {
    let n = price.len();
    if n != yields.len() {
        return Err(Error::InvalidInput(format!("{n} prices but {} yields", yields.len())));
    }
    if n < 2 {
        return Err(Error::InvalidInput("moments need at least 2 draws".into()));
    }
    let mp = price.iter().sum::<f64>() / n as f64;
    let my = yields.iter().sum::<f64>() / n as f64;
    let (mut spp, mut syy, mut spy) = (0.0, 0.0, 0.0);
    for (p, y) in price.iter().zip(yields) {
        let (dp, dy) = (p - mp, y - my);
        spp += dp * dp;
        syy += dy * dy;
        spy += dp * dy;
    }
    if spp <= 0.0 || syy <= 0.0 {
        return Err(Error::Numerical("zero variance; correlation undefined".into()));
    }
    let corr = (spy / (spp * syy).sqrt()).clamp(-1.0, 1.0);
    let d = (n - 1) as f64;
    Ok(Moments { corr, sd_price: (spp / d).sqrt(), sd_yield: (syy / d).sqrt(), mean_price: mp, mean_yield: my })
}

/// Moments of the retrended, re-based draws.
pub fn moments_from_draws(draws: &JointDraws) -> Result<Moments> {
    if draws.price_level.is_empty() {
        return Err(Error::InvalidInput("draws have not been retrended".into()));
    }
    moments(&draws.price_level, &draws.yield_level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEstimate {
    pub stocks: f64,
    pub estimate: f64,
    pub jackknife_variance: f64,
    pub group_count: usize,
}

/// Rule for forming jackknife groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupScheme {
    /// Records sorted by (county, year) and dealt to groups in turn.
    RoundRobin,
    /// Whole counties, sorted by id, dealt to groups in turn.
    WholeCounty,
}

/// Group index in `0..b` for each record keyed by `(county, year)`.
pub fn jackknife_groups(keys: &[(String, i32)], b: usize, scheme: GroupScheme) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::InvalidInput(format!("jackknife needs at least 2 groups, got {b}")));
    }
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&i, &j| keys[i].cmp(&keys[j]));
    let mut group = vec![0; keys.len()];
    match scheme {
        GroupScheme::RoundRobin => {
            if keys.len() < b {
                return Err(Error::InvalidInput(format!("{} records cannot fill {b} groups", keys.len())));
            }
            for (pos, &i) in idx.iter().enumerate() {
                group[i] = pos % b;
            }
        }
        GroupScheme::WholeCounty => {
            let mut county_rank: BTreeMap<&str, usize> = BTreeMap::new();
            for (county, _) in keys {
                let next = county_rank.len();
                county_rank.entry(county.as_str()).or_insert(next);
            }
            if county_rank.len() < b {
                return Err(Error::InvalidInput(format!("{} counties cannot fill {b} groups", county_rank.len())));
            }
            // Re-rank in sorted order for a deterministic assignment.
            let sorted: BTreeMap<&str, usize> =
                county_rank.keys().enumerate().map(|(r, c)| (*c, r % b)).collect();
            for (i, (county, _)) in keys.iter().enumerate() {
                group[i] = sorted[county.as_str()];
            }
        }
    }
    Ok(group)
}

/// `(B - 1)/B * sum (c_b - mean)^2`.
pub fn jackknife_variance(estimates: &[f64]) -> f64 {
    let b = estimates.len() as f64;
    if estimates.len() < 2 {
        return 0.0;
    }
    let m = estimates.iter().sum::<f64>() / b;
    (b - 1.0) / b * estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeResult {
    /// Delete-a-group estimates, one vector per group.
    pub replicates: Vec<Vec<f64>>,
    /// Componentwise jackknife variance.
    pub variance: Vec<f64>,
}

/// Runs `pipeline` on the records retained after deleting each group in
/// turn and applies the jackknife variance componentwise. Groups run
/// concurrently; a failure reports its group id.
pub fn jackknife<F>(groups: &[usize], b: usize, pipeline: F) -> Result<JackknifeResult>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidInput(format!("jackknife needs at least 2 groups, got {b}")));
    }
    let replicates: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|g| {
            let keep: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] != g).collect();
            pipeline(&keep).map_err(|e| Error::JackknifeGroup { group: g, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let width = replicates[0].len();
    if replicates.iter().any(|r| r.len() != width) {
        return Err(Error::Numerical("jackknife replicates differ in length".into()));
    }
    let variance = (0..width)
        .map(|k| jackknife_variance(&replicates.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    Ok(JackknifeResult { replicates, variance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Fit {
    pub state: String,
    pub rho0: f64,
    pub rho1: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub pairs: usize,
    /// |rho1| < 1.
    pub stationary: bool,
}

/// Pooled OLS of `y_t` on `y_{t-1}` over counties of one state, using only
/// consecutive-year pairs. Records are `(county, year, detrended yield)`.
pub fn fit_ar1(state: &str, records: &[(String, i32, f64)]) -> Result<Ar1Fit> {
    let mut by_key: BTreeMap<(&str, i32), f64> = BTreeMap::new();
    for (c, y, v) in records {
        by_key.insert((c.as_str(), *y), *v);
    }
    let pairs: Vec<(f64, f64)> = by_key
        .iter()
        .filter_map(|(&(c, y), &v)| by_key.get(&(c, y - 1)).map(|&prev| (prev, v)))
        .collect();
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("state {state}: {n} lagged pairs, need at least 3")));
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Numerical(format!("state {state}: lagged yields have zero variance")));
    }
    let rho1 = sxy / sxx;
    let rho0 = my - rho1 * mx;
    let sse: f64 = pairs.iter().map(|p| (p.1 - rho0 - rho1 * p.0).powi(2)).sum();
    let std_error = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    let q = if n > 2 {
        StudentsT::new(0.0, 1.0, nf - 2.0).map_err(|e| Error::Numerical(e.to_string()))?.inverse_cdf(0.975)
    } else {
        f64::NAN
    };
    Ok(Ar1Fit {
        state: state.to_string(),
        rho0,
        rho1,
        std_error,
        ci95: (rho1 - q * std_error, rho1 + q * std_error),
        pairs: n,
        stationary: rho1.abs() < 1.0,
    })
}

/// LOESS curve through `(stocks, estimate)` points evaluated at `query`.
pub fn smooth_curve(stocks: &[f64], estimates: &[f64], query: &[f64], span: f64) -> Result<Vec<f64>> {
    Ok(loess_smooth(stocks, estimates, query, span, 1)?)
}
