//! Output files: CSV tables, manifests and deterministic names.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rccm::certnets::CHECKPOINT_VERSION;
use rccm::config::Config;
use sha2::{Digest, Sha256};

/// `{subcommand}-{system}-{seed}` with an optional suffix before the extension.
pub fn artifact_name(subcommand: &str, system: &str, seed: u64, suffix: &str, ext: &str) -> String {
    if suffix.is_empty() {
        format!("{subcommand}-{system}-{seed}.{ext}")
    } else {
        format!("{subcommand}-{system}-{seed}-{suffix}.{ext}")
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Column-ordered table written through the `csv` crate.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn nums(vs: &[f64]) -> impl Iterator<Item = String> + '_ {
    vs.iter().map(|&v| num(v))
}

/// Column names `prefix_0 … prefix_{k−1}`.
pub fn indexed(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (0..k).map(move |i| format!("{prefix}_{i}"))
}

/// Run record in config syntax: tool versions as comments, then sorted entries.
pub struct Manifest {
    entries: Config,
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        let mut entries = Config::new();
        entries.set("subcommand", subcommand);
        Self { entries }
    }

    /// Starts from a config snapshot so the manifest itself can be fed back as a config.
    pub fn from_config(cfg: Config) -> Self {
        Self { entries: cfg }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.set(key, value);
        self
    }

    /// Records the path and digest of an input file.
    pub fn input(&mut self, key: &str, path: &Path) -> Result<&mut Self> {
        let digest = file_digest(path)?;
        self.entries.set(key, path.display());
        self.entries.set(&format!("{key}_sha256"), digest);
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        format!(
            "# rccm {}\n# checkpoint format {}\n{}",
            env!("CARGO_PKG_VERSION"),
            CHECKPOINT_VERSION,
            self.entries.to_text()
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_the_pattern() {
        assert_eq!(
            artifact_name("simulate", "pvtol", 3, "", "csv"),
            "simulate-pvtol-3.csv"
        );
        assert_eq!(
            artifact_name("plan", "pvtol", 0, "replay", "csv"),
            "plan-pvtol-0-replay.csv"
        );
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-17, 1e300] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn manifest_parses_as_config() {
        let mut m = Manifest::new("simulate");
        m.set("sigma", 1.0).set("runs", 100);
        let cfg = Config::parse(&m.to_text()).unwrap();
        assert_eq!(cfg.get("subcommand"), Some("simulate"));
        assert_eq!(cfg.get_or("runs", 0usize).unwrap(), 100);
    }
}
