//! The flat key-value configuration of `tppca simulate`.
//!
//! Keys mirror the scenario fields. `n`, `d_true` and `sigma` accept a
//! single value or a list; noise levels may be written as numbers or as
//! multiples of pi such as "pi/8", "3pi/2" or "2*pi". Missing keys take the
//! values of the reference grid.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tppca::lattice::LatticeSpec;
use tppca::model_selection::SelectionOptions;
use tppca::simulation::{SimGrid, SimScenario};

use crate::error::{CliError, CliResult};

pub const KEYS: [&str; 10] = [
    "n",
    "D",
    "d_true",
    "sigma",
    "replications",
    "seed",
    "selection",
    "J",
    "alpha",
    "threshold",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: Vec<usize>,
    #[serde(rename = "D")]
    pub big_d: usize,
    pub d_true: Vec<usize>,
    pub sigma: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub selection: bool,
    #[serde(rename = "J")]
    pub lattice_radius: u32,
    pub alpha: f64,
    pub threshold: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let grid = SimGrid::default();
        let sel = SelectionOptions::default();
        Self {
            n: grid.n,
            big_d: grid.big_d,
            d_true: grid.d_true,
            sigma: grid.sigma,
            replications: grid.replications,
            seed: grid.seed,
            selection: grid.selection,
            lattice_radius: LatticeSpec::default().radius,
            alpha: sel.alpha,
            threshold: sel.cv_threshold,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_ratio(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.parse::<f64>().ok()? / b.parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

/// Parses "0.3", "pi", "pi/8", "3pi/2", "3/2pi" or "2*pi".
pub fn parse_angle_expr(text: &str) -> Option<f64> {
    let s: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '*')
        .collect::<String>()
        .to_ascii_lowercase();
    let value = match s.split_once("pi") {
        Some((pre, post)) => {
            let coef = if pre.is_empty() {
                1.0
            } else {
                parse_ratio(pre)?
            };
            let div = match post {
                "" => 1.0,
                p => p.strip_prefix('/')?.parse::<f64>().ok()?,
            };
            coef * PI / div
        }
        None => parse_ratio(&s)?,
    };
    value.is_finite().then_some(value)
}

fn as_usize(key: &str, v: &toml::Value) -> CliResult<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| usage(format!("'{key}' must be a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &toml::Value) -> CliResult<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => parse_angle_expr(s)
            .ok_or_else(|| usage(format!("'{key}': cannot read '{s}' as a number"))),
        other => Err(usage(format!("'{key}' must be a number, got {other}"))),
    }
}

fn list<T>(
    key: &str,
    v: &toml::Value,
    item: impl Fn(&str, &toml::Value) -> CliResult<T>,
) -> CliResult<Vec<T>> {
    match v {
        toml::Value::Array(items) if items.is_empty() => {
            Err(usage(format!("'{key}' must not be empty")))
        }
        toml::Value::Array(items) => items.iter().map(|x| item(key, x)).collect(),
        single => Ok(vec![item(key, single)?]),
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| usage(format!("invalid config: {e}")))?;
        let unknown: Vec<&str> = table
            .keys()
            .map(String::as_str)
            .filter(|k| !KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(usage(format!(
                "unknown config keys: {} (allowed: {})",
                unknown.join(", "),
                KEYS.join(", ")
            )));
        }
        let mut cfg = Self::default();
        for (key, v) in &table {
            match key.as_str() {
                "n" => cfg.n = list(key, v, as_usize)?,
                "D" => cfg.big_d = as_usize(key, v)?,
                "d_true" => cfg.d_true = list(key, v, as_usize)?,
                "sigma" => cfg.sigma = list(key, v, as_f64)?,
                "replications" => cfg.replications = as_usize(key, v)?,
                "seed" => {
                    cfg.seed = v
                        .as_integer()
                        .and_then(|i| u64::try_from(i).ok())
                        .ok_or_else(|| {
                            usage(format!("'seed' must be a non-negative integer, got {v}"))
                        })?
                }
                "selection" => {
                    cfg.selection = v.as_bool().ok_or_else(|| {
                        usage(format!("'selection' must be true or false, got {v}"))
                    })?
                }
                "J" => {
                    cfg.lattice_radius =
                        u32::try_from(as_usize(key, v)?).map_err(|_| usage("'J' is too large"))?
                }
                "alpha" => cfg.alpha = as_f64(key, v)?,
                "threshold" => cfg.threshold = as_f64(key, v)?,
                _ => unreachable!("keys were checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` object of a manifest written by
    /// an earlier run.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid manifest: {e}")))?;
            let config = manifest
                .get("config")
                .cloned()
                .ok_or_else(|| usage("manifest has no 'config' object"))?;
            serde_json::from_value(config)
                .map_err(|e| usage(format!("invalid manifest config: {e}")))?
        } else {
            Self::from_toml(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.n.is_empty() || self.d_true.is_empty() || self.sigma.is_empty() {
            return Err(usage(
                "n, d_true and sigma must each list at least one value",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(usage(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        for scn in self.scenarios() {
            scn.validate().map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<SimScenario> {
        let grid = SimGrid {
            n: self.n.clone(),
            big_d: self.big_d,
            d_true: self.d_true.clone(),
            sigma: self.sigma.clone(),
            replications: self.replications,
            seed: self.seed,
            selection: self.selection,
        };
        grid.scenarios()
            .into_iter()
            .map(|mut s| {
                s.lattice = LatticeSpec::new(self.lattice_radius);
                s
            })
            .collect()
    }

    pub fn selection_options(&self) -> Option<SelectionOptions> {
        self.selection.then(|| SelectionOptions {
            alpha: self.alpha,
            cv_threshold: self.threshold,
            ..SelectionOptions::default()
        })
    }
}
