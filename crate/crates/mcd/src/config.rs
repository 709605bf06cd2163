//! Flat key=value run configuration for the command-line front end.
//!
//! One `key = value` per line, `#` for comments. Every key is optional at
//! parse time; subcommands check for the keys they need. Serializing a
//! parsed config and parsing it again yields the same config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::detector::ThresholdMethod;
use crate::models::Family;
use crate::simharness::TestKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed run configuration. Each field mirrors one config key of the same
/// name; `None` means the key was absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub family: Option<Family>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub n_prime: Option<usize>,
    pub sigma2: Option<f64>,
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub trials_per_point: Option<usize>,
    pub tests: Option<Vec<TestKind>>,
    pub seed: Option<u64>,
    pub method: Option<ThresholdMethod>,
    pub trials: Option<usize>,
    pub theta: Option<Vec<f64>>,
}

fn parse_scalar<T>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| ConfigError::Parse {
        line,
        message: format!("bad value {value:?} for key {key}: {e}"),
    })
}

fn parse_list<T>(line: usize, key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Err(ConfigError::Parse {
            line,
            message: format!("key {key} needs a non-empty comma-separated list"),
        });
    }
    value
        .split(',')
        .map(|item| parse_scalar(line, key, item.trim()))
        .collect()
}

fn set_once<T>(
    slot: &mut Option<T>,
    line: usize,
    key: &str,
    value: T,
) -> Result<(), ConfigError> {
    if slot.is_some() {
        return Err(ConfigError::Parse {
            line,
            message: format!("duplicate key {key}"),
        });
    }
    *slot = Some(value);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "family" => set_once(&mut config.family, line, key, parse_scalar(line, key, value)?)?,
                "d" => set_once(&mut config.d, line, key, parse_scalar(line, key, value)?)?,
                "n" => set_once(&mut config.n, line, key, parse_scalar(line, key, value)?)?,
                "n_prime" => {
                    set_once(&mut config.n_prime, line, key, parse_scalar(line, key, value)?)?
                }
                "sigma2" => set_once(&mut config.sigma2, line, key, parse_scalar(line, key, value)?)?,
                "rho" => set_once(&mut config.rho, line, key, parse_scalar(line, key, value)?)?,
                "alpha" => set_once(&mut config.alpha, line, key, parse_scalar(line, key, value)?)?,
                "grid" => set_once(&mut config.grid, line, key, parse_list(line, key, value)?)?,
                "trials_per_point" => set_once(
                    &mut config.trials_per_point,
                    line,
                    key,
                    parse_scalar(line, key, value)?,
                )?,
                "tests" => set_once(&mut config.tests, line, key, parse_list(line, key, value)?)?,
                "seed" => set_once(&mut config.seed, line, key, parse_scalar(line, key, value)?)?,
                "method" => set_once(&mut config.method, line, key, parse_scalar(line, key, value)?)?,
                "trials" => set_once(&mut config.trials, line, key, parse_scalar(line, key, value)?)?,
                "theta" => set_once(&mut config.theta, line, key, parse_list(line, key, value)?)?,
                other => {
                    return Err(ConfigError::Parse {
                        line,
                        message: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(config)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn join_displayed<T: fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for RunConfig {
    /// Canonical serialization: present keys in a fixed order, one per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(v) = self.family {
            writeln!(f, "family = {v}")?;
        }
        if let Some(v) = self.d {
            writeln!(f, "d = {v}")?;
        }
        if let Some(v) = self.n {
            writeln!(f, "n = {v}")?;
        }
        if let Some(v) = self.n_prime {
            writeln!(f, "n_prime = {v}")?;
        }
        if let Some(v) = self.sigma2 {
            writeln!(f, "sigma2 = {v}")?;
        }
        if let Some(v) = self.rho {
            writeln!(f, "rho = {v}")?;
        }
        if let Some(v) = self.alpha {
            writeln!(f, "alpha = {v}")?;
        }
        if let Some(v) = &self.grid {
            writeln!(f, "grid = {}", join_displayed(v))?;
        }
        if let Some(v) = self.trials_per_point {
            writeln!(f, "trials_per_point = {v}")?;
        }
        if let Some(v) = &self.tests {
            writeln!(f, "tests = {}", join_displayed(v))?;
        }
        if let Some(v) = self.seed {
            writeln!(f, "seed = {v}")?;
        }
        if let Some(v) = self.method {
            writeln!(f, "method = {v}")?;
        }
        if let Some(v) = self.trials {
            writeln!(f, "trials = {v}")?;
        }
        if let Some(v) = &self.theta {
            writeln!(f, "theta = {}", join_displayed(v))?;
        }
        Ok(())
    }
}
