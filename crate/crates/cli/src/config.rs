//! Run configuration: TOML file, `--set` overrides, validation and hashing.

use std::path::Path;

use kamtori::kamflow::KamConfig;
use kamtori::model::PRESETS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A usage problem tied to one configuration key.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError {
    pub key: String,
    pub message: String,
}

impl UsageError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        UsageError { key: key.into(), message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub eps: f64,
    pub t: f64,
    /// `None` uses the preset's default parameter.
    pub xi: Option<Vec<f64>>,
    pub seed: u64,
    pub kam: KamConfig,
    pub orbit: OrbitConfig,
    pub measure: MeasureConfig,
    pub verify: VerifyConfig,
    pub scheme: SchemeConfig,
    pub survival: SurvivalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "twist-1-1".into(),
            eps: 1e-6,
            t: 0.1,
            xi: None,
            seed: 42,
            kam: KamConfig::default(),
            orbit: OrbitConfig::default(),
            measure: MeasureConfig::default(),
            verify: VerifyConfig::default(),
            scheme: SchemeConfig::default(),
            survival: SurvivalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    /// `twist` or `scheme`.
    pub map: String,
    pub steps: usize,
    pub u0: f64,
    pub v0: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        OrbitConfig { map: "twist".into(), steps: 2000, u0: 0.0, v0: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub points: usize,
    pub grid_res: usize,
    pub mc_samples: usize,
    /// `None` takes the schedule exponent of `[kam]`.
    pub tau: Option<f64>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { gamma_min: 0.01, gamma_max: 0.1, points: 6, grid_res: 2048, mc_samples: 2000, tau: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub n_phi: usize,
    pub orbit_steps: usize,
    pub residual_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { n_phi: 64, orbit_steps: 20_000, residual_tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub ts: Vec<f64>,
    pub defect_points: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig { ts: vec![0.1, 0.05, 0.025], defect_points: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSection {
    pub eps_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub gamma: f64,
    pub samples: usize,
    pub residual_tol: f64,
    pub n_phi: usize,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        let d = kamtori::verify::SurvivalConfig::default();
        SurvivalSection {
            eps_grid: d.eps_grid,
            t_grid: d.t_grid,
            gamma: d.gamma,
            samples: d.samples,
            residual_tol: d.residual_tol,
            n_phi: d.n_phi,
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value; bare words are
/// taken as strings.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), UsageError> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(UsageError::new(assignment, "--set expects key=value"));
    };
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError::new(key, "empty key segment"));
    }
    let mut cur = table;
    for (depth, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(UsageError::new(parts[..=depth].join("."), "is not a table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the file (if any), applies overrides and the seed flag, and
/// validates the result.
pub fn resolve(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, UsageError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| UsageError::new("config", format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| UsageError::new("config", e.to_string().trim().to_string()))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    if let Some(seed) = seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string().lines().next().unwrap_or_default().to_string();
        let key = match unknown_field(&message) {
            Some(field) if path == "." => field,
            _ => path,
        };
        UsageError::new(key, message)
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn check(ok: bool, key: &str, message: &str) -> Result<(), UsageError> {
    if ok {
        Ok(())
    } else {
        Err(UsageError::new(key, message))
    }
}

pub fn validate(c: &RunConfig) -> Result<(), UsageError> {
    check(PRESETS.contains(&c.preset.as_str()), "preset", &format!("unknown preset, expected one of {PRESETS:?}"))?;
    check(c.eps.is_finite() && c.eps >= 0.0, "eps", "must be finite and non-negative")?;
    check(c.t.is_finite() && c.t > 0.0, "t", "must be positive")?;
    if let Some(xi) = &c.xi {
        check(xi.iter().all(|v| v.is_finite()), "xi", "entries must be finite")?;
    }
    let k = &c.kam;
    check(k.tau.is_none_or(|t| t > 0.0), "kam.tau", "must be positive")?;
    check(k.gamma > 0.0 && k.gamma.is_finite(), "kam.gamma", "must be positive")?;
    check(k.s0 > 0.0, "kam.s0", "must be positive")?;
    check(k.rho0.is_none_or(|r| r > 0.0 && r < k.s0), "kam.rho0", "must lie in (0, s0)")?;
    check(k.r0.is_none_or(|r| r > 0.0), "kam.r0", "must be positive")?;
    check(k.stop_eps > 0.0, "kam.stop_eps", "must be positive")?;
    check(k.k_max.is_none_or(|m| m > 0), "kam.k_max", "must be positive")?;
    check(k.kappa > 0.0, "kam.kappa", "must be positive")?;
    check(k.l_order > 0, "kam.L", "must be positive")?;
    check(["twist", "scheme"].contains(&c.orbit.map.as_str()), "orbit.map", "expected `twist` or `scheme`")?;
    check(c.orbit.steps > 0, "orbit.steps", "must be positive")?;
    let m = &c.measure;
    check(m.gamma_min > 0.0, "measure.gamma_min", "must be positive")?;
    check(m.gamma_max > m.gamma_min, "measure.gamma_max", "must exceed gamma_min")?;
    check(m.points >= 2, "measure.points", "need at least 2")?;
    check(m.grid_res >= 64, "measure.grid_res", "need at least 64")?;
    check(m.tau.is_none_or(|t| t > 0.0), "measure.tau", "must be positive")?;
    check(c.verify.n_phi > 0, "verify.n_phi", "must be positive")?;
    check(c.verify.orbit_steps >= 1000, "verify.orbit_steps", "need at least 1000")?;
    check(c.verify.residual_tol > 0.0, "verify.residual_tol", "must be positive")?;
    let ts = &c.scheme.ts;
    check(
        ts.len() >= 2 && ts.iter().all(|t| *t > 0.0) && ts.windows(2).all(|w| w[1] < w[0]),
        "scheme.ts",
        "need at least two positive, strictly decreasing step sizes",
    )?;
    check(c.scheme.defect_points > 0, "scheme.defect_points", "must be positive")?;
    let s = &c.survival;
    check(!s.eps_grid.is_empty() && s.eps_grid.iter().all(|e| *e >= 0.0), "survival.eps_grid", "need non-negative entries")?;
    check(!s.t_grid.is_empty() && s.t_grid.iter().all(|t| *t > 0.0), "survival.t_grid", "need positive entries")?;
    check(s.gamma > 0.0, "survival.gamma", "must be positive")?;
    check(s.samples > 0, "survival.samples", "must be positive")?;
    Ok(())
}

/// Hex SHA-256 of the command name and the canonical JSON of the config.
pub fn content_hash(command: &str, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
