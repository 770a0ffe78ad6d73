//! Flat `key = value` configuration files. Command-line flags take
//! precedence over the file; the file takes precedence over the environment.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context};

pub const SEED_ENV: &str = "SCALEFORGE_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Config::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    /// Blank lines and lines starting with `#` are ignored. Keys may use `-`
    /// or `_` interchangeably; a repeated key is an error.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                return Err(anyhow!("line {}: empty key", n + 1));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(anyhow!("line {}: duplicate key {key:?}", n + 1));
            }
        }
        Ok(Config { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key:?}: cannot parse {v:?}: {e}")))
            .transpose()
    }

    /// The flag if given, else the config value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Seed from the flag, the config file, `SCALEFORGE_SEED`, or 0.
    pub fn seed(&self, flag: Option<u64>) -> anyhow::Result<u64> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| anyhow!("{SEED_ENV}={v:?}: {e}")),
            Err(_) => Ok(0),
        }
    }
}
