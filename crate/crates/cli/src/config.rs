//! Plain key=value configuration files.
//!
//! Every run writes its fully resolved configuration next to its outputs;
//! feeding that file back through `--config` reproduces the run. Explicit
//! command-line flags take precedence over config-file values, which take
//! precedence over defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not key = value: '{}'", lineno + 1, line);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{} = {}\n", k, v));
        }
        std::fs::write(path, out).with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(_) => bail!("config value '{}' for '{}' does not parse", raw, key),
            },
        }
    }
}

/// Three-way resolution: explicit flag, then config file, then default.
pub fn pick<T: FromStr + Clone>(
    flag: Option<T>,
    config: &KvConfig,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = config.get::<T>(key)? {
        return Ok(v);
    }
    Ok(default)
}

/// Like `pick` but without a default; errors when the value is absent.
pub fn pick_required<T: FromStr + Clone>(flag: Option<T>, config: &KvConfig, key: &str) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = config.get::<T>(key)? {
        return Ok(v);
    }
    bail!("missing required option --{}", key.replace('_', "-"))
}
