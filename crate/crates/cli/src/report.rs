//! Summary tables aggregated from the per-run CSVs in a directory.
//!
//! * `report-tracking.csv`: mean ± std of total tracking error per simulate run set.
//! * `report-tubes.csv`: refined tube sizes per system, λ and selector, averaged over seeds.
//! * `report-violations.csv`: statistical violation fractions per checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::artifacts::{num, Table};
use crate::commands::mean_std;
use crate::Outcome;

/// CSV rows keyed by header name.
fn read_rows(path: &Path, required: &[&str]) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    for col in required {
        if !header.iter().any(|h| h == col) {
            bail!("{}: missing column {col:?}", path.display());
        }
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(
            header
                .iter()
                .cloned()
                .zip(rec.iter().map(String::from))
                .collect(),
        );
    }
    Ok(out)
}

/// `(system, seed)` from `{subcommand}-{system}-{seed}[-suffix].csv`.
fn parse_name(stem: &str, subcommand: &str) -> Option<(String, u64)> {
    let rest = stem.strip_prefix(subcommand)?.strip_prefix('-')?;
    let mut parts = rest.splitn(3, '-');
    let system = parts.next()?.to_string();
    let seed = parts.next()?.parse().ok()?;
    Some((system, seed))
}

fn files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> &str {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("")
}

fn field<'a>(row: &'a BTreeMap<String, String>, k: &str) -> &'a str {
    row.get(k).map(String::as_str).unwrap_or("")
}

fn float(row: &BTreeMap<String, String>, k: &str) -> f64 {
    field(row, k).parse().unwrap_or(f64::NAN)
}

pub fn report(dir: &Path) -> Result<Outcome> {
    let all = files(dir)?;

    let mut tracking = Table::new([
        "system",
        "seed",
        "runs",
        "diverged",
        "mean_total_error",
        "std_total_error",
        "worst_margin",
        "contained",
        "alpha",
    ]);
    let mut tube_sets: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut violations = Table::new(["system", "seed", "inequality", "fraction", "samples"]);

    for p in &all {
        let s = stem(p);
        if s.starts_with("simulate-") && s.ends_with("-summary") {
            let Some((system, seed)) = parse_name(s, "simulate") else {
                continue;
            };
            let rows = read_rows(p, &["status", "total_error", "worst_margin", "alpha"])?;
            let ok: Vec<_> = rows.iter().filter(|r| field(r, "status") == "ok").collect();
            let totals: Vec<f64> = ok.iter().map(|r| float(r, "total_error")).collect();
            let margins: Vec<f64> = ok.iter().map(|r| float(r, "worst_margin")).collect();
            let (mean, std) = mean_std(&totals);
            let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
            tracking.push(vec![
                system,
                seed.to_string(),
                rows.len().to_string(),
                (rows.len() - ok.len()).to_string(),
                num(mean),
                num(std),
                num(worst),
                margins.iter().filter(|m| **m >= 0.0).count().to_string(),
                rows.first()
                    .map(|r| field(r, "alpha").to_string())
                    .unwrap_or_default(),
            ]);
        } else if s.starts_with("refine-") && !s.ends_with("-trace") {
            if parse_name(s, "refine").is_none() {
                continue;
            }
            for r in read_rows(p, &["system", "lambda", "selector", "alpha"])? {
                tube_sets
                    .entry((
                        field(&r, "system").into(),
                        field(&r, "lambda").into(),
                        field(&r, "selector").into(),
                    ))
                    .or_default()
                    .push(float(&r, "alpha"));
            }
        } else if s.starts_with("verify-") {
            let Some((system, seed)) = parse_name(s, "verify") else {
                continue;
            };
            let Ok(rows) = read_rows(p, &["inequality", "fraction", "samples"]) else {
                continue;
            };
            for r in rows {
                violations.push(vec![
                    system.clone(),
                    seed.to_string(),
                    field(&r, "inequality").into(),
                    field(&r, "fraction").into(),
                    field(&r, "samples").into(),
                ]);
            }
        }
    }

    let mut tubes = Table::new([
        "system",
        "lambda",
        "selector",
        "count",
        "mean_alpha",
        "std_alpha",
    ]);
    for ((system, lambda, selector), v) in &tube_sets {
        let (mean, std) = mean_std(v);
        tubes.push(vec![
            system.clone(),
            lambda.clone(),
            selector.clone(),
            v.len().to_string(),
            num(mean),
            num(std),
        ]);
    }

    if tracking.is_empty() && tubes.is_empty() && violations.is_empty() {
        return Ok(Outcome::Failed(format!(
            "no simulate, refine or verify tables in {}",
            dir.display()
        )));
    }
    tracking.write(&dir.join("report-tracking.csv"))?;
    tubes.write(&dir.join("report-tubes.csv"))?;
    violations.write(&dir.join("report-violations.csv"))?;
    println!(
        "report: {} tracking sets, {} tube groups, {} violation rows",
        tracking.len(),
        tubes.len(),
        violations.len()
    );
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_with_and_without_suffix() {
        assert_eq!(
            parse_name("simulate-pvtol-7-summary", "simulate"),
            Some(("pvtol".into(), 7))
        );
        assert_eq!(
            parse_name("refine-neural_lander-0", "refine"),
            Some(("neural_lander".into(), 0))
        );
        assert_eq!(parse_name("refine-pvtol-x", "refine"), None);
    }
}
