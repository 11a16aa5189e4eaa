//! Plain `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sqr_core::simstudy::PriceMode;
use sqr_core::stats::GroupScheme;
use sqr_core::premium::{IvMode, Reference};

use crate::error::{CliError, Result};

/// Every accepted key with its default; an empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("market", ""),
    ("yields", ""),
    ("policies", ""),
    ("states", ""),
    ("base_year", ""),
    ("target_year", ""),
    ("seed", "1"),
    ("loess_span", "0.75"),
    ("knot_spacing", "10"),
    ("tau_grid", ""),
    ("gacv_taus", "0.1,0.25,0.5,0.75,0.9"),
    ("curve_taus", "0.1,0.25,0.5,0.75,0.9"),
    ("lambda_grid", ""),
    ("lambda_price", ""),
    ("lambda_yield", ""),
    ("interior_knots", "4"),
    ("tau_clamp", "0.001,0.999"),
    ("draws", "1000"),
    ("sample_stocks", ""),
    ("stock_points", "20"),
    ("curve_span", "0.75"),
    ("jackknife_groups", "50"),
    ("jackknife_scheme", "round_robin"),
    ("coverage", "0.7,0.75,0.8,0.85"),
    ("aph", ""),
    ("aph_window", "10"),
    ("iv_scale", "1"),
    ("iv_mode", "level_consistent"),
    ("reference", "two_channel"),
    ("rating_coverage", "0.75"),
    ("rating_start", ""),
    ("sim_mode", "both"),
    ("sim_replicates", "100"),
    ("sim_years", "100"),
    ("sim_counties", "500"),
    ("sim_draws", "10000"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Resolved values, defaults filled in; the basis of the config hash.
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    root: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().filter(|(_, d)| !d.is_empty()).map(|(k, d)| (k.to_string(), d.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return Err(CliError::Config(format!("line {}: unknown key '{k}'", n + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            if v.is_empty() {
                values.remove(k);
            } else {
                values.insert(k.to_string(), v.to_string());
            }
        }
        let cfg = Self { values, root: root.to_path_buf() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses every typed key once so that errors surface before any work.
    fn validate(&self) -> Result<()> {
        for k in ["base_year", "target_year", "rating_start"] {
            self.opt_parse::<i32>(k)?;
        }
        for k in ["seed"] {
            self.opt_parse::<u64>(k)?;
        }
        for k in ["knot_spacing", "interior_knots", "draws", "stock_points", "jackknife_groups", "aph_window"] {
            let v: usize = self.get(k)?;
            if v == 0 {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        for k in ["sim_replicates", "sim_years", "sim_counties", "sim_draws"] {
            let v: usize = self.get(k)?;
            if v == 0 {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        for k in ["loess_span", "curve_span", "iv_scale", "rating_coverage"] {
            let v: f64 = self.get(k)?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        for k in ["lambda_price", "lambda_yield", "aph"] {
            if let Some(v) = self.opt_parse::<f64>(k)? {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(CliError::Config(format!("{k} must be non-negative")));
                }
            }
        }
        for k in ["tau_grid", "gacv_taus", "curve_taus", "lambda_grid", "sample_stocks", "coverage", "tau_clamp"] {
            self.list(k)?;
        }
        if let Some(g) = self.list("tau_grid")? {
            if g.len() < 2 || g.windows(2).any(|w| w[1] <= w[0]) || g.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(CliError::Config("tau_grid must increase strictly inside (0, 1)".into()));
            }
        }
        let clamp = self.list("tau_clamp")?.unwrap_or_default();
        if clamp.len() != 2 || !(clamp[0] > 0.0 && clamp[0] < clamp[1] && clamp[1] < 1.0) {
            return Err(CliError::Config("tau_clamp needs two values lo,hi with 0 < lo < hi < 1".into()));
        }
        for psi in self.list("coverage")?.unwrap_or_default() {
            if !(psi > 0.0 && psi <= 1.0) {
                return Err(CliError::Config(format!("coverage {psi} outside (0, 1]")));
            }
        }
        self.group_scheme()?;
        self.iv_mode()?;
        self.reference()?;
        self.sim_modes()?;
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}'")))
    }

    pub fn opt_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|v| Self::parse_value(key, v)).transpose()
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.opt_parse(key)?.ok_or_else(|| CliError::Config(format!("missing required key '{key}'")))
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| v.split(',').map(|x| Self::parse_value::<f64>(key, x.trim())).collect())
            .transpose()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let p = PathBuf::from(self.raw(key).ok_or_else(|| CliError::Config(format!("missing required key '{key}'")))?);
        Ok(if p.is_absolute() { p } else { self.root.join(p) })
    }

    pub fn states(&self) -> Option<Vec<String>> {
        self.raw("states").map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("seed".into(), seed.to_string());
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").unwrap_or(1)
    }

    pub fn group_scheme(&self) -> Result<GroupScheme> {
        match self.raw("jackknife_scheme") {
            Some("round_robin") => Ok(GroupScheme::RoundRobin),
            Some("whole_county") => Ok(GroupScheme::WholeCounty),
            v => Err(CliError::Config(format!("jackknife_scheme: expected round_robin or whole_county, got {v:?}"))),
        }
    }

    pub fn iv_mode(&self) -> Result<IvMode> {
        match self.raw("iv_mode") {
            Some("level_consistent") => Ok(IvMode::LevelConsistent),
            Some("as_written") => Ok(IvMode::AsWritten),
            v => Err(CliError::Config(format!("iv_mode: expected level_consistent or as_written, got {v:?}"))),
        }
    }

    pub fn reference(&self) -> Result<Reference> {
        match self.raw("reference") {
            Some("two_channel") => Ok(Reference::TwoChannel),
            Some("three_channel") => Ok(Reference::ThreeChannel),
            v => Err(CliError::Config(format!("reference: expected two_channel or three_channel, got {v:?}"))),
        }
    }

    pub fn sim_modes(&self) -> Result<Vec<PriceMode>> {
        match self.raw("sim_mode") {
            Some("linear") => Ok(vec![PriceMode::Linear]),
            Some("nonlinear") => Ok(vec![PriceMode::Nonlinear]),
            Some("both") => Ok(vec![PriceMode::Linear, PriceMode::Nonlinear]),
            v => Err(CliError::Config(format!("sim_mode: expected linear, nonlinear or both, got {v:?}"))),
        }
    }

    /// Canonical `key = value` text of the resolved configuration. Input
    /// paths are absolute, so the text replays the run from any directory.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if matches!(k.as_str(), "market" | "yields" | "policies") {
                let p = PathBuf::from(v);
                let p = if p.is_absolute() { p } else { self.root.join(p) };
                let p = std::path::absolute(&p).unwrap_or(p);
                out.push_str(&format!("{k} = {}\n", p.display()));
            } else {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
