//! Flat `key = value` configuration text.
//!
//! Lines starting with `#` are comments. Keys may carry a section prefix such as
//! `train.epochs`; lookups try the bare key first and then every prefixed form.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable that overrides every `seed` key.
pub const SEED_ENV: &str = "RCCM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid key {key:?}"),
                });
            }
            if entries
                .insert(key.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn lookup(&self, key: &str) -> Option<(&str, &str)> {
        if let Some((k, v)) = self.entries.get_key_value(key) {
            return Some((k, v));
        }
        self.entries
            .iter()
            .find(|(k, _)| k.rsplit_once('.').is_some_and(|(_, tail)| tail == key))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lookup(key).map(|(_, v)| v)
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.lookup(key) {
            None => Ok(default),
            Some((k, v)) => v
                .parse()
                .map_err(|e| Error::invalid(format!("config key {k}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.lookup(key) {
            None => Ok(None),
            Some((k, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::invalid(format!("config key {k}: cannot parse {v:?}: {e}"))),
        }
    }

    /// Fails on any key outside `known` (compared without section prefix).
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            let bare = k.rsplit_once('.').map_or(k.as_str(), |(_, t)| t);
            if !known.contains(&bare) {
                return Err(Error::invalid(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }

    /// Replaces every `seed` entry with `value`, adding one if absent.
    pub fn override_seed(&mut self, value: u64) {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.as_str() == "seed" || k.ends_with(".seed"))
            .cloned()
            .collect();
        if keys.is_empty() {
            self.set("seed", value);
        }
        for k in keys {
            self.set(&k, value);
        }
    }

    /// Applies the `RCCM_SEED` override when the variable is set.
    pub fn apply_env_seed(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(s) => {
                let seed = s.trim().parse().map_err(|_| {
                    Error::invalid(format!("{SEED_ENV} must be an integer, got {s:?}"))
                })?;
                self.override_seed(seed);
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }
}
