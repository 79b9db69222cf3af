//! Tube-size refinement for a new output selector with the networks frozen.
//!
//! With `θ` fixed, every quadratic form `ηᵀC1η` and `ηᵀC2η` is an explicit
//! function of `(α, μ)`:
//!
//! - `ηᵀC1η = a − μ b`
//! - `ηᵀC2η = p − q/α + (α − μ) r`
//!
//! so the coefficients are computed once per sample and unit vector, and the
//! gain optimization runs on scalars.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::sigmoid;
use crate::certificates::{
    certificate_matrices, sample_etas, sample_point, LossOptions, WSampling,
};
use crate::certnets::{CertificateCheckpoint, GainParams, TubeEntry};
use crate::error::{invalid, Error, Result};
use crate::numerics::{mix_seed, XI_TRAIN};
use crate::systems::{ControlAffineSystem, OutputSelector};
use crate::training::{adam_step, AdamState};

const STREAM_SAMPLES: u64 = 21;
const STREAM_ETAS: u64 = 22;
const BISECTION_ITERS: usize = 80;
/// Relative gap between the gradient and bisection results that triggers a warning.
pub const CROSS_CHECK_GAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub n_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Penalty below which the refined gain counts as certified.
    pub tol: f64,
    pub xi: usize,
    pub w_sampling: WSampling,
    /// Starting `(α, μ)`; the checkpoint's gains when absent.
    pub init: Option<(f64, f64)>,
    pub cross_check: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            steps: 2000,
            lr: 0.01,
            seed: 0,
            tol: 1e-4,
            xi: XI_TRAIN,
            w_sampling: WSampling::default(),
            init: None,
            cross_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub entry: TubeEntry,
    /// Gains reached by the optimizer before any repair.
    pub optimized: (f64, f64),
    /// Smallest certified `(α, μ)` found by bisection.
    pub bisection: Option<(f64, f64)>,
    /// `(objective, α)` after each optimizer step.
    pub trace: Vec<(f64, f64)>,
}

/// Quadratic-form coefficients of `C1` and `C2` over a fixed sample set.
#[derive(Debug, Clone)]
pub struct GainProblem {
    c1: Vec<[f64; 2]>,
    c2: Vec<[f64; 3]>,
    scale: f64,
}

impl GainProblem {
    pub fn build(
        sys: &ControlAffineSystem,
        ck: &CertificateCheckpoint,
        sel: &OutputSelector,
        n_samples: usize,
        xi: usize,
        seed: u64,
        mode: WSampling,
    ) -> Result<Self> {
        if n_samples == 0 || xi == 0 {
            return Err(invalid("refinement needs samples and unit vectors"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SAMPLES));
        let samples: Vec<_> = (0..n_samples)
            .map(|_| sample_point(sys, ck.hyper.sigma, mode, &mut rng))
            .collect();
        let opts = LossOptions {
            xi,
            etas_seed: mix_seed(seed, STREAM_ETAS),
            ..Default::default()
        };
        let (n, l) = (sys.n(), sys.l());
        let lambda = ck.hyper.lambda;
        let per: Vec<(Vec<[f64; 2]>, Vec<[f64; 3]>)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mats = certificate_matrices(sys, ck, sel, s)?;
                let e1 = sample_etas(n + l, &opts, i, 0)?;
                let e2 = sample_etas(n + l, &opts, i, 1)?;
                let t = &mats.c1_top_left;
                let c1 = e1
                    .iter()
                    .map(|eta| {
                        let (h1, h2) = eta.split_at(n);
                        let a = quad(t, h1) + 2.0 * bilinear(&mats.m_bw, h1, h2);
                        [a, dot(h2, h2)]
                    })
                    .collect();
                let c2 = e2
                    .iter()
                    .map(|eta| {
                        let (h1, h2) = eta.split_at(n);
                        let ch: f64 = (0..mats.cal_c.nrows())
                            .map(|r| {
                                (0..n)
                                    .map(|j| mats.cal_c[(r, j)] * h1[j])
                                    .sum::<f64>()
                                    .powi(2)
                            })
                            .sum();
                        [lambda * quad(&mats.m, h1), ch, dot(h2, h2)]
                    })
                    .collect();
                Ok((c1, c2))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            c1: Vec::with_capacity(n_samples * xi),
            c2: Vec::with_capacity(n_samples * xi),
            scale: 1.0 / (n_samples * xi) as f64,
        };
        for (a, b) in per {
            out.c1.extend(a);
            out.c2.extend(b);
        }
        if out
            .c1
            .iter()
            .flatten()
            .chain(out.c2.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteSample { sample: 0 });
        }
        Ok(out)
    }

    /// Mean `L_PD(−C1)`; depends on `μ` only.
    pub fn penalty_c1(&self, mu: f64) -> f64 {
        self.c1
            .iter()
            .map(|[a, b]| (a - mu * b).max(0.0))
            .sum::<f64>()
            * self.scale
    }

    /// Mean `L_PD(C2)`.
    pub fn penalty_c2(&self, alpha: f64, mu: f64) -> f64 {
        self.c2
            .iter()
            .map(|[p, q, r]| (q / alpha - p - (alpha - mu) * r).max(0.0))
            .sum::<f64>()
            * self.scale
    }

    pub fn penalty(&self, alpha: f64, mu: f64) -> f64 {
        self.penalty_c1(mu) + self.penalty_c2(alpha, mu)
    }

    /// Objective `L_PD(−C1) + L_PD(C2) + α` and its partials in `(α, μ)`.
    pub fn objective(&self, alpha: f64, mu: f64) -> (f64, f64, f64) {
        let (mut val, mut d_alpha, mut d_mu) = (0.0, 0.0, 0.0);
        for [a, b] in &self.c1 {
            let v = a - mu * b;
            if v > 0.0 {
                val += v;
                d_mu -= b;
            }
        }
        for [p, q, r] in &self.c2 {
            let v = q / alpha - p - (alpha - mu) * r;
            if v > 0.0 {
                val += v;
                d_alpha -= q / (alpha * alpha) + r;
                d_mu += r;
            }
        }
        (
            val * self.scale + alpha,
            d_alpha * self.scale + 1.0,
            d_mu * self.scale,
        )
    }

    /// Smallest `μ ≥ from` with `L_PD(−C1) ≤ budget`.
    fn min_mu(&self, from: f64, budget: f64) -> Option<f64> {
        if self.penalty_c1(from) <= budget {
            return Some(from);
        }
        let hi = grow(from, |m| self.penalty_c1(m) <= budget)?;
        Some(bisect(from, hi, |m| self.penalty_c1(m) <= budget))
    }

    /// Smallest `α ≥ from` (and above `μ`) with `L_PD(C2) ≤ budget`.
    fn min_alpha(&self, from: f64, mu: f64, budget: f64) -> Option<f64> {
        let lo = from.max(mu * (1.0 + 1e-9) + 1e-12);
        if self.penalty_c2(lo, mu) <= budget {
            return Some(lo);
        }
        let hi = grow(lo, |a| self.penalty_c2(a, mu) <= budget)?;
        Some(bisect(lo, hi, |a| self.penalty_c2(a, mu) <= budget))
    }

    /// Raises `(α, μ)` just enough for the penalty to fit within `tol`.
    pub fn repair(&self, alpha: f64, mu: f64, tol: f64) -> Option<(f64, f64)> {
        if self.penalty(alpha, mu) <= tol {
            return Some((alpha, mu));
        }
        let mu = self.min_mu(mu, 0.5 * tol)?;
        let alpha = self.min_alpha(alpha, mu, 0.5 * tol)?;
        Some((alpha, mu))
    }

    /// Smallest certified `α` found by bisection on `μ` and then on `α`.
    pub fn bisection(&self, tol: f64) -> Option<(f64, f64)> {
        let mu = self.min_mu(1e-9, 0.5 * tol)?;
        let alpha = self.min_alpha(mu, mu, 0.5 * tol)?;
        Some((alpha, mu))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(m: &nalgebra::DMatrix<f64>, v: &[f64]) -> f64 {
    bilinear(m, v, v)
}

fn bilinear(m: &nalgebra::DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    (0..m.nrows())
        .map(|i| a[i] * (0..m.ncols()).map(|j| m[(i, j)] * b[j]).sum::<f64>())
        .sum()
}

/// First of `from·2^k` (k ≥ 1) satisfying `ok`.
fn grow(from: f64, ok: impl Fn(f64) -> bool) -> Option<f64> {
    let mut x = from.max(1e-6);
    for _ in 0..80 {
        x *= 2.0;
        if ok(x) {
            return Some(x);
        }
    }
    None
}

/// Smallest point of `[lo, hi]` satisfying a monotone `ok` with `ok(hi)`.
fn bisect(mut lo: f64, mut hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Minimizes `α` for `sel` with the networks frozen and registers the result under `sel.label`.
pub fn refine_gain(
    ck: &mut CertificateCheckpoint,
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    opts: &RefineOptions,
) -> Result<RefineOutcome> {
    let outcome = refine_gain_detached(ck, sys, sel, opts)?;
    ck.tubes.insert(sel.label.clone(), outcome.entry.clone());
    ck.revision += 1;
    Ok(outcome)
}

/// [`refine_gain`] without touching the checkpoint.
pub fn refine_gain_detached(
    ck: &CertificateCheckpoint,
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    opts: &RefineOptions,
) -> Result<RefineOutcome> {
    if !(opts.lr > 0.0) || !(opts.tol > 0.0) {
        return Err(invalid(
            "refinement needs a positive learning rate and tolerance",
        ));
    }
    let problem = GainProblem::build(
        sys,
        ck,
        sel,
        opts.n_samples,
        opts.xi,
        opts.seed,
        opts.w_sampling,
    )?;
    let start = match opts.init {
        Some((alpha, mu)) => GainParams::from_alpha_mu(alpha, mu)?,
        None => ck.gains,
    };
    let mut raw = [start.raw_a, start.raw_b];
    let mut adam = AdamState::new(2);
    let mut trace = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let g = GainParams {
            raw_a: raw[0],
            raw_b: raw[1],
        };
        let (val, d_alpha, d_mu) = problem.objective(g.alpha(), g.mu());
        let grads = [
            (d_alpha + d_mu) * sigmoid(raw[0]),
            d_alpha * sigmoid(raw[1]),
        ];
        adam_step(&mut raw, &grads, &mut adam, opts.lr)?;
        let next = GainParams {
            raw_a: raw[0],
            raw_b: raw[1],
        };
        trace.push((val, next.alpha()));
    }
    let end = GainParams {
        raw_a: raw[0],
        raw_b: raw[1],
    };
    let optimized = (end.alpha(), end.mu());
    let repaired = problem.repair(optimized.0, optimized.1, opts.tol);
    let (alpha, mu) = repaired.unwrap_or(optimized);
    let penalty = problem.penalty(alpha, mu);
    let certified = repaired.is_some() && penalty <= opts.tol;
    let bisection = if opts.cross_check {
        problem.bisection(opts.tol)
    } else {
        None
    };
    if let Some((ab, _)) = bisection {
        if (alpha - ab).abs() > CROSS_CHECK_GAP * ab {
            log::warn!(
                "refined α = {alpha:.6} for {} differs from bisection α = {ab:.6} by more than {:.0}%",
                sel.label,
                100.0 * CROSS_CHECK_GAP
            );
        }
    }
    Ok(RefineOutcome {
        entry: TubeEntry {
            selector: sel.clone(),
            alpha,
            mu,
            penalty,
            certified,
        },
        optimized,
        bisection,
        trace,
    })
}
