//! The five working subcommands.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use rccm::certnets::{load_checkpoint, save_checkpoint};
use rccm::config::{Config, SEED_ENV};
use rccm::numerics::mix_seed;
use rccm::planner::{self, Scenario};
use rccm::refinement::{refine_gain, RefineOptions};
use rccm::simulation::{
    gen_nominal, rollout_batch, total_tracking_error, tube_margin, BatchOptions,
};
use rccm::training::{train_with, TrainConfig};
use rccm::verification::{grid_verify, violation_rate, GridOptions, Region};
use rccm::{CertificateCheckpoint, ControlAffineSystem, OutputSelector, SelectorKind};

use crate::artifacts::{artifact_name, ensure_dir, indexed, num, nums, Manifest, Table};
use crate::{Outcome, PlanArgs, RefineArgs, SimulateArgs, TrainArgs, VerifyArgs, VerifyMode};

/// `flag`, unless `RCCM_SEED` is set.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV} must be an integer, got {s:?}")),
        Err(_) => Ok(flag),
    }
}

fn load(path: &Path) -> Result<(CertificateCheckpoint, ControlAffineSystem)> {
    let ck = load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let sys = ck.system_model()?;
    Ok((ck, sys))
}

fn parse_matrix(text: &str, cols: usize, key: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| {
            r.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| anyhow!("bad number {t:?} in `{key}`"))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        bail!("`{key}` needs rows of {cols} numbers separated by `;`");
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Resolves `positions`, `inputs`, `training` or `custom @FILE`.
///
/// A custom file holds `label`, `c` and `d`, with matrix rows separated by `;`.
pub fn resolve_selector(
    words: &[String],
    ck: &CertificateCheckpoint,
    sys: &ControlAffineSystem,
) -> Result<OutputSelector> {
    let name = words.first().map(String::as_str).unwrap_or("training");
    match (name, words.get(1)) {
        ("positions", None) => Ok(sys.output_selector(&SelectorKind::Positions)?),
        ("inputs", None) => Ok(sys.output_selector(&SelectorKind::Inputs)?),
        ("training", None) => Ok(ck.selector.clone()),
        ("custom", Some(file)) => {
            let path = file
                .strip_prefix('@')
                .ok_or_else(|| anyhow!("custom selector file must be given as @FILE"))?;
            let cfg = Config::load(Path::new(path))
                .with_context(|| format!("cannot read selector file {path}"))?;
            let get = |k: &str| {
                cfg.get(k)
                    .ok_or_else(|| anyhow!("selector file lacks `{k}`"))
            };
            let c = parse_matrix(get("c")?, sys.n(), "c")?;
            let d = parse_matrix(get("d")?, sys.m(), "d")?;
            let mut sel = sys.output_selector(&SelectorKind::Custom { c, d })?;
            sel.label = cfg.get("label").unwrap_or("custom").to_string();
            if ["positions", "inputs", "training"].contains(&sel.label.as_str()) {
                bail!("custom selector label {:?} is reserved", sel.label);
            }
            Ok(sel)
        }
        ("custom", None) => bail!("custom selector needs @FILE"),
        (other, _) => bail!(
            "unknown selector {other:?} (expected positions, inputs, training or custom @FILE)"
        ),
    }
}

/// Tube gain registered for `sel`, or the trained gain for the training output.
fn tube_alpha(ck: &CertificateCheckpoint, sel: &OutputSelector) -> Result<f64> {
    if let Some(t) = ck.tubes.get(&sel.label) {
        return Ok(t.alpha);
    }
    if sel.label == ck.selector.label {
        return Ok(ck.gains.alpha());
    }
    bail!(
        "checkpoint has no refined {:?} tube; run `rccm refine --selector {}` first",
        sel.label,
        sel.label
    )
}

pub fn train(a: &TrainArgs, out: &Path) -> Result<Outcome> {
    let mut cfg = Config::load(&a.config)
        .with_context(|| format!("cannot read config {}", a.config.display()))?;
    cfg.apply_env_seed()?;
    let tc = TrainConfig::from_config(&cfg)?;
    ensure_dir(out)?;
    let base = |suffix: &str, ext: &str| {
        out.join(artifact_name("train", &tc.system, tc.seed, suffix, ext))
    };

    let total = tc.epochs * tc.steps_per_epoch();
    let result = train_with(&tc, |row| {
        if row.step % 50 == 0 || row.step + 1 == total {
            log::info!(
                "step {}/{}: loss {:.5} alpha {:.4}",
                row.step + 1,
                total,
                row.loss,
                row.alpha
            );
        }
    })?;
    let ck = &result.checkpoint;

    let mut hist = Table::new([
        "step", "risk_c1", "risk_c2", "risk_c3", "risk_c4", "alpha", "total",
    ]);
    for r in &ck.history {
        hist.push(vec![
            r.step.to_string(),
            num(r.risk_c1),
            num(r.risk_c2),
            num(r.risk_c3),
            num(r.risk_c4),
            num(r.alpha),
            num(r.loss),
        ]);
    }
    hist.write(&base("", "csv"))?;
    save_checkpoint(ck, &base("", "ckpt"))?;
    Manifest::from_config(tc.to_config()).write(&base("", "manifest"))?;

    println!(
        "trained {} for {} steps: alpha {:.6} mu {:.6}",
        tc.system,
        ck.history.len(),
        ck.gains.alpha(),
        ck.gains.mu()
    );
    Ok(match result.diverged {
        Some(e) => Outcome::Failed(e.to_string()),
        None => Outcome::Success,
    })
}

pub fn refine(a: &RefineArgs, out: &Path) -> Result<Outcome> {
    let (mut ck, sys) = load(&a.ckpt)?;
    let sel = resolve_selector(&a.selector, &ck, &sys)?;
    let seed = effective_seed(a.seed)?;
    let init = match (a.alpha_init, a.mu_init) {
        (None, None) => None,
        (Some(al), mu) => Some((al, mu.unwrap_or_else(|| (0.5 * al).min(ck.gains.mu())))),
        (None, Some(_)) => bail!("--mu-init requires --alpha-init"),
    };
    let opts = RefineOptions {
        n_samples: a.samples,
        steps: a.steps,
        lr: a.lr,
        seed,
        init,
        ..Default::default()
    };
    ensure_dir(out)?;
    let mut manifest = Manifest::new("refine");
    manifest
        .input("ckpt", &a.ckpt)?
        .set("selector", a.selector.join(" "))
        .set("samples", a.samples)
        .set("steps", a.steps)
        .set("lr", a.lr)
        .set("seed", seed);
    if let Some((al, mu)) = init {
        manifest.set("alpha_init", al).set("mu_init", mu);
    }

    let outcome = refine_gain(&mut ck, &sys, &sel, &opts)?;
    save_checkpoint(&ck, &a.ckpt)?;

    let name =
        |suffix: &str, ext: &str| out.join(artifact_name("refine", &ck.system, seed, suffix, ext));
    let mut trace = Table::new(["selector", "step", "objective", "alpha"]);
    for (i, (obj, al)) in outcome.trace.iter().enumerate() {
        trace.push(vec![sel.label.clone(), i.to_string(), num(*obj), num(*al)]);
    }
    trace.write(&name(&format!("{}-trace", sel.label), "csv"))?;

    let mut registry = Table::new([
        "system",
        "lambda",
        "selector",
        "alpha",
        "mu",
        "penalty",
        "certified",
        "sigma",
    ]);
    for (label, t) in &ck.tubes {
        registry.push(vec![
            ck.system.clone(),
            num(ck.hyper.lambda),
            label.clone(),
            num(t.alpha),
            num(t.mu),
            num(t.penalty),
            t.certified.to_string(),
            num(ck.hyper.sigma),
        ]);
    }
    registry.write(&name("", "csv"))?;
    manifest
        .set("revision", ck.revision)
        .set("alpha", outcome.entry.alpha)
        .set("mu", outcome.entry.mu)
        .set("penalty", outcome.entry.penalty)
        .set("certified", outcome.entry.certified);
    if let Some((ab, _)) = outcome.bisection {
        manifest.set("alpha_bisection", ab);
    }
    manifest.write(&name("", "manifest"))?;

    let e = &outcome.entry;
    println!(
        "refined {}: alpha {:.6} mu {:.6} penalty {:.3e} ({}) revision {}",
        sel.label,
        e.alpha,
        e.mu,
        e.penalty,
        if e.certified {
            "certified"
        } else {
            "uncertified"
        },
        ck.revision
    );
    Ok(if e.certified {
        Outcome::Success
    } else {
        Outcome::Failed(format!(
            "penalty {:.3e} above tolerance {:.1e}",
            e.penalty, opts.tol
        ))
    })
}

pub fn verify(a: &VerifyArgs, out: &Path) -> Result<Outcome> {
    let (ck, sys) = load(&a.ckpt)?;
    let sel = if a.selector.is_empty() {
        ck.selector.clone()
    } else {
        resolve_selector(&a.selector, &ck, &sys)?
    };
    let seed = effective_seed(a.seed)?;
    ensure_dir(out)?;
    let name =
        |suffix: &str, ext: &str| out.join(artifact_name("verify", &ck.system, seed, suffix, ext));
    let mut manifest = Manifest::new("verify");
    manifest
        .input("ckpt", &a.ckpt)?
        .set("selector", &sel.label)
        .set("seed", seed);

    match a.mode {
        VerifyMode::Stat => {
            let r = violation_rate(&ck, &sys, &sel, a.samples, seed)?;
            let mut t = Table::new(["inequality", "fraction", "samples"]);
            for (k, v) in [("C1", r.c1), ("C2", r.c2), ("C3", r.c3), ("C4", r.c4)] {
                t.push(vec![k.into(), num(v), r.samples.to_string()]);
            }
            t.write(&name("", "csv"))?;
            manifest
                .set("mode", "stat")
                .set("samples", a.samples)
                .set("max_violation", a.max_violation)
                .write(&name("", "manifest"))?;
            println!(
                "violation fractions over {} samples: C1 {:.4} C2 {:.4} C3 {:.4} C4 {:.4}",
                r.samples, r.c1, r.c2, r.c3, r.c4
            );
            if r.c1 > a.max_violation || r.c2 > a.max_violation {
                return Ok(Outcome::Failed(format!(
                    "C1/C2 violation fractions {:.4}/{:.4} exceed {}",
                    r.c1, r.c2, a.max_violation
                )));
            }
            Ok(Outcome::Success)
        }
        VerifyMode::Grid => {
            let path = a
                .region
                .as_ref()
                .ok_or_else(|| anyhow!("grid mode needs --region FILE"))?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let region = Region::from_text(&text)?;
            let opts = GridOptions {
                seed,
                ..Default::default()
            };
            let report = grid_verify(&ck, &sys, &sel, &region, a.tau, &opts)?;
            std::fs::write(name("", "report"), report.to_text())?;
            let mut t = Table::new(
                ["inequality".to_string(), "lambda_max".to_string()]
                    .into_iter()
                    .chain(indexed("s", region.dim())),
            );
            for o in &report.offenders {
                t.push(
                    [format!("C{}", o.inequality), num(o.value)]
                        .into_iter()
                        .chain(nums(&o.point))
                        .collect(),
                );
            }
            t.write(&name("", "csv"))?;
            manifest
                .set("mode", "grid")
                .input("region", path)?
                .set("tau", a.tau)
                .write(&name("", "manifest"))?;
            println!(
                "grid of {} points on {:?}: max C1 {:.4e} (margin {:.4e}) {}, max -C2 {:.4e} (margin {:.4e}) {}{}",
                report.points,
                region.label,
                report.grid_max_c1,
                report.l_eq10 * a.tau,
                if report.pass_c1 { "pass" } else { "fail" },
                report.grid_max_c2,
                report.l_eq11 * a.tau,
                if report.pass_c2 { "pass" } else { "fail" },
                if report.rigorous { "" } else { " (modulo sampled bounds)" }
            );
            Ok(if report.passed() {
                Outcome::Success
            } else {
                Outcome::Failed("grid verification did not certify the region".into())
            })
        }
    }
}

pub fn simulate(a: &SimulateArgs, out: &Path) -> Result<Outcome> {
    if a.runs == 0 || a.stride == 0 {
        bail!("--runs and --stride must be at least 1");
    }
    let (ck, sys) = load(&a.ckpt)?;
    let sel = resolve_selector(&a.selector, &ck, &sys)?;
    let alpha = tube_alpha(&ck, &sel)?;
    let seed = effective_seed(a.seed)?;
    ensure_dir(out)?;

    let nominal = gen_nominal(&sys, a.horizon, a.dt, seed, None)?;
    let seeds: Vec<u64> = (0..a.runs as u64).map(|i| mix_seed(seed, i)).collect();
    let runs = rollout_batch(
        &sys,
        &ck,
        &sel,
        &nominal,
        &seeds,
        BatchOptions {
            sigma: a.sigma,
            on_nominal: !a.offset_start,
        },
    );

    let (n, m, l) = (sys.n(), sys.m(), sys.l());
    let coords = sys.position_indices().to_vec();
    let mut steps = Table::new(
        ["run".to_string(), "t".to_string()]
            .into_iter()
            .chain(indexed("xs", n))
            .chain(indexed("x", n))
            .chain(indexed("us", m))
            .chain(indexed("u", m))
            .chain(indexed("w", l))
            .chain(["xe_norm", "pos_err", "tube", "margin"].map(String::from)),
    );
    let mut summary = Table::new([
        "run",
        "seed",
        "status",
        "total_error",
        "worst_margin",
        "alpha",
        "left_state_set",
    ]);
    let mut totals = Vec::new();
    let mut worst = f64::INFINITY;
    let (mut contained, mut failures) = (0usize, 0usize);
    for (run, (s, r)) in runs.iter().enumerate() {
        match r {
            Ok(traj) => {
                let (margins, w_margin) = tube_margin(traj, alpha);
                let total = total_tracking_error(traj, &coords);
                let xe = traj.error_norms(&(0..n).collect::<Vec<_>>());
                let pe = traj.error_norms(&coords);
                for k in (0..traj.times.len()).step_by(a.stride) {
                    let row = [run.to_string(), num(traj.times[k])]
                        .into_iter()
                        .chain(nums(&traj.x_star[k]))
                        .chain(nums(&traj.x[k]))
                        .chain(nums(&traj.u_star[k]))
                        .chain(nums(&traj.u[k]))
                        .chain(nums(&traj.w[k]))
                        .chain([
                            num(xe[k]),
                            num(pe[k]),
                            num(alpha * traj.w_sup[k]),
                            num(margins[k]),
                        ])
                        .collect();
                    steps.push(row);
                }
                totals.push(total);
                worst = worst.min(w_margin);
                contained += (w_margin >= 0.0) as usize;
                summary.push(vec![
                    run.to_string(),
                    s.to_string(),
                    "ok".into(),
                    num(total),
                    num(w_margin),
                    num(alpha),
                    traj.left_state_set.to_string(),
                ]);
            }
            Err(e) => {
                failures += 1;
                log::warn!("run {run} (seed {s}) failed: {e}");
                summary.push(vec![
                    run.to_string(),
                    s.to_string(),
                    "diverged".into(),
                    "NaN".into(),
                    "NaN".into(),
                    num(alpha),
                    "true".into(),
                ]);
            }
        }
    }
    let name = |suffix: &str, ext: &str| {
        out.join(artifact_name("simulate", &ck.system, seed, suffix, ext))
    };
    steps.write(&name("", "csv"))?;
    summary.write(&name("summary", "csv"))?;
    let mut manifest = Manifest::new("simulate");
    manifest
        .input("ckpt", &a.ckpt)?
        .set("selector", &sel.label)
        .set("alpha", alpha)
        .set("sigma", a.sigma)
        .set("runs", a.runs)
        .set("seed", seed)
        .set("horizon", a.horizon)
        .set("dt", a.dt)
        .set("offset_start", a.offset_start)
        .set("stride", a.stride)
        .set("nominal_seed", nominal.seed)
        .write(&name("", "manifest"))?;

    let (mean, std) = mean_std(&totals);
    println!(
        "{} runs: total tracking error {:.4} ± {:.4}; worst tube margin {:.4e}; {} of {} inside the {:?} tube (alpha {:.4}){}",
        a.runs,
        mean,
        std,
        worst,
        contained,
        a.runs,
        sel.label,
        alpha,
        if failures > 0 { format!("; {failures} diverged") } else { String::new() }
    );
    Ok(if failures > 0 || contained < a.runs {
        Outcome::Failed(format!(
            "{} of {} runs left the tube or diverged",
            a.runs - contained,
            a.runs
        ))
    } else {
        Outcome::Success
    })
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn plan(a: &PlanArgs, out: &Path) -> Result<Outcome> {
    let (ck, sys) = load(&a.ckpt)?;
    let seed = effective_seed(a.seed)?;
    let base = if a.scenario == "packaged" {
        Scenario::packaged()
    } else {
        Scenario::load(Path::new(&a.scenario))
            .with_context(|| format!("cannot load scenario {}", a.scenario))?
    };
    let sc = base.with_checkpoint_tubes(&ck, a.tube_scale)?;
    let sigma = a.sigma.unwrap_or(ck.hyper.sigma);
    ensure_dir(out)?;
    let name =
        |suffix: &str, ext: &str| out.join(artifact_name("plan", &ck.system, seed, suffix, ext));
    let mut manifest = Manifest::new("plan");
    if a.scenario == "packaged" {
        manifest.set("scenario", "packaged");
    } else {
        manifest.input("scenario", Path::new(&a.scenario))?;
    }
    manifest
        .input("ckpt", &a.ckpt)?
        .set("tube_scale", a.tube_scale)
        .set("position_tube", sc.position_tube)
        .set("input_tube", sc.input_tube)
        .set("replays", a.replays)
        .set("sigma", sigma)
        .set("seed", seed)
        .set("dt", a.dt);
    std::fs::write(name("", "scenario"), sc.to_text())?;

    let result = match planner::plan(&sc, &sys, a.dt) {
        Ok(r) => r,
        Err(rccm::Error::InfeasibleScenario(msg)) => {
            manifest
                .set("status", "infeasible(start-goal)")
                .write(&name("", "manifest"))?;
            println!("infeasible(start-goal): {msg}");
            return Ok(Outcome::Failed(format!("infeasible scenario: {msg}")));
        }
        Err(e) => return Err(e.into()),
    };

    let mut wp = Table::new(["index", "px", "pz"]);
    for (i, p) in result.waypoints.iter().enumerate() {
        wp.push(vec![i.to_string(), num(p[0]), num(p[1])]);
    }
    wp.write(&name("waypoints", "csv"))?;

    if let Some(f) = result.failure {
        manifest
            .set("status", format!("infeasible({f})"))
            .write(&name("", "manifest"))?;
        println!("infeasible({f}) after slowdown {}", result.slowdown);
        return Ok(Outcome::Failed(format!("infeasible({f})")));
    }
    let nominal = result
        .nominal
        .as_ref()
        .ok_or_else(|| anyhow!("feasible plan without a nominal"))?;
    let (n, m) = (sys.n(), sys.m());
    let mut traj = Table::new(
        ["t".to_string()]
            .into_iter()
            .chain(indexed("xs", n))
            .chain(indexed("us", m)),
    );
    for k in 0..nominal.times.len() {
        traj.push(
            [num(nominal.times[k])]
                .into_iter()
                .chain(nums(&nominal.x[k]))
                .chain(nums(&nominal.u[k]))
                .collect(),
        );
    }
    traj.write(&name("", "csv"))?;

    let seeds: Vec<u64> = (0..a.replays as u64).map(|i| mix_seed(seed, i)).collect();
    let rep = planner::replay(&result, &sys, &ck, &seeds, sigma)?;
    let checks = result
        .checks
        .as_ref()
        .ok_or_else(|| anyhow!("feasible plan without checks"))?;
    let mut summary = Table::new([
        "runs",
        "collisions",
        "diverged",
        "min_clearance",
        "max_deviation",
        "slowdown",
        "duration",
        "nominal_clearance",
        "residual",
    ]);
    summary.push(vec![
        rep.runs.to_string(),
        rep.collisions.to_string(),
        rep.diverged.to_string(),
        num(rep.min_clearance),
        num(rep.max_deviation),
        num(result.slowdown),
        num(nominal.horizon()),
        num(checks.min_clearance),
        num(checks.residual),
    ]);
    summary.write(&name("replay", "csv"))?;
    manifest
        .set("status", "feasible")
        .write(&name("", "manifest"))?;

    println!(
        "feasible plan: {} waypoints, duration {:.2} s (slowdown {}); {} replays, {} collisions, min clearance {:.4}, max deviation {:.4}",
        result.waypoints.len(),
        nominal.horizon(),
        result.slowdown,
        rep.runs,
        rep.collisions,
        rep.min_clearance,
        rep.max_deviation
    );
    Ok(if rep.collisions > 0 {
        Outcome::Failed(format!(
            "{} of {} replays collided",
            rep.collisions, rep.runs
        ))
    } else {
        Outcome::Success
    })
}
