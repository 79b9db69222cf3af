//! Closed-loop rollouts under piecewise-constant disturbances.
//!
//! A rollout integrates the nominal and the actual state side by side with
//! fixed-step RK4, so that starting on the nominal with zero disturbance
//! reproduces it exactly.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certnets::CertificateCheckpoint;
use crate::error::{invalid, Error, Result};
use crate::numerics::{mix_seed, random_unit_vector};
use crate::systems::{ControlAffineSystem, OutputSelector};

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_HORIZON: f64 = 10.0;
pub const MAX_NOMINAL_ATTEMPTS: usize = 50;
/// Smallest disturbance segment norm.
pub const MIN_SEGMENT_NORM: f64 = 0.1;

const STREAM_DISTURBANCE: u64 = 11;
const STREAM_NOMINAL: u64 = 12;
const DIVERGENCE_NORM: f64 = 1e8;

/// Piecewise-constant disturbance `w(t) = values[i]` on `[breakpoints[i], breakpoints[i + 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSignal {
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl DisturbanceSignal {
    pub fn zero(l: usize) -> Self {
        Self {
            breakpoints: vec![0.0],
            values: vec![vec![0.0; l]],
            sigma: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn segment(&self, t: f64) -> usize {
        self.breakpoints
            .partition_point(|b| *b <= t)
            .saturating_sub(1)
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        &self.values[self.segment(t)]
    }

    /// `sup_{s ≤ t} ‖w(s)‖`.
    pub fn sup_norm_until(&self, t: f64) -> f64 {
        self.values[..=self.segment(t)]
            .iter()
            .map(|v| norm(v))
            .fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Segments with lengths uniform in `[0, 1]` and norms uniform in `[0.1, σ]`, each
/// pointing in a uniformly random direction.
pub fn gen_disturbance(l: usize, horizon: f64, sigma: f64, seed: u64) -> Result<DisturbanceSignal> {
    if !(horizon > 0.0) || !(sigma > 0.0) || l == 0 {
        return Err(invalid(
            "disturbance needs a positive horizon, σ and dimension",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_DISTURBANCE));
    let lo = MIN_SEGMENT_NORM.min(sigma);
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    let mut t = 0.0;
    while t <= horizon {
        let len: f64 = rng.random_range(0.0..=1.0);
        let mag = if lo < sigma {
            rng.random_range(lo..=sigma)
        } else {
            sigma
        };
        let dir = random_unit_vector(l, &mut rng);
        breakpoints.push(t);
        values.push(dir.into_iter().map(|d| d * mag).collect());
        t += len;
    }
    Ok(DisturbanceSignal {
        breakpoints,
        values,
        sigma,
    })
}

/// Nominal state and input on a uniform grid, with optional input rates for interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Nominal {
    pub dt: f64,
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub u_dot: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Nominal {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nominal has samples")
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Stored inputs at `t`: cubic Hermite when input rates are stored, linear otherwise.
    pub fn input_at(&self, t: f64) -> Vec<f64> {
        let last = self.steps();
        let s = (t / self.dt).clamp(0.0, last as f64);
        let k = (s.floor() as usize).min(last.saturating_sub(1));
        let a = s - k as f64;
        if last == 0 || a == 0.0 {
            return self.u[k].clone();
        }
        let (y1, y2) = (&self.u[k], &self.u[k + 1]);
        match &self.u_dot {
            None => y1.iter().zip(y2).map(|(p, q)| p + a * (q - p)).collect(),
            Some(d) => {
                let (a2, a3) = (a * a, a * a * a);
                let h00 = 2.0 * a3 - 3.0 * a2 + 1.0;
                let h10 = a3 - 2.0 * a2 + a;
                let h01 = 3.0 * a2 - 2.0 * a3;
                let h11 = a3 - a2;
                (0..y1.len())
                    .map(|j| {
                        h00 * y1[j]
                            + h10 * self.dt * d[k][j]
                            + h01 * y2[j]
                            + h11 * self.dt * d[k + 1][j]
                    })
                    .collect()
            }
        }
    }
}

fn grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !(dt > 0.0) || dt > horizon {
        return Err(invalid("need 0 < dt ≤ horizon"));
    }
    let steps = (horizon / dt).round() as usize;
    Ok((0..=steps).map(|k| k as f64 * dt).collect())
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(p, q)| p + a * q).collect()
}

fn rk4_combine(x: &[f64], dt: f64, k: [&[f64]; 4]) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

/// One RK4 step of `ẋ = rhs(t, x)`.
pub fn rk4_step(rhs: impl Fn(f64, &[f64]) -> Vec<f64>, t: f64, x: &[f64], dt: f64) -> Vec<f64> {
    let k1 = rhs(t, x);
    let k2 = rhs(t + 0.5 * dt, &axpy(x, 0.5 * dt, &k1));
    let k3 = rhs(t + 0.5 * dt, &axpy(x, 0.5 * dt, &k2));
    let k4 = rhs(t + dt, &axpy(x, dt, &k3));
    rk4_combine(x, dt, [&k1, &k2, &k3, &k4])
}

/// Open-loop integration of `ẋ* = f + B u*(t)` from `x0` with the given grid inputs.
pub fn nominal_from_inputs(
    sys: &ControlAffineSystem,
    x0: &[f64],
    dt: f64,
    inputs: Vec<Vec<f64>>,
    seed: u64,
) -> Result<Nominal> {
    if x0.len() != sys.n() || inputs.len() < 2 || inputs.iter().any(|u| u.len() != sys.m()) {
        return Err(invalid("nominal inputs do not match the system"));
    }
    let times: Vec<f64> = (0..inputs.len()).map(|k| k as f64 * dt).collect();
    let mut nom = Nominal {
        dt,
        times,
        x: vec![x0.to_vec()],
        u: inputs,
        u_dot: None,
        seed,
    };
    let zero_w = vec![0.0; sys.l()];
    for k in 0..nom.steps() {
        let t = nom.times[k];
        let next = rk4_step(
            |s, x| sys.dynamics_unchecked(x, &nom.input_at(s), &zero_w),
            t,
            &nom.x[k],
            dt,
        );
        if next.iter().any(|v| !v.is_finite()) || norm(&next) > DIVERGENCE_NORM {
            return Err(Error::Diverged { time: t + dt });
        }
        nom.x.push(next);
    }
    Ok(nom)
}

/// Largest per-step mismatch between stored states and one RK4 step of the nominal dynamics.
pub fn nominal_residual(sys: &ControlAffineSystem, nom: &Nominal) -> f64 {
    let zero_w = vec![0.0; sys.l()];
    (0..nom.steps())
        .map(|k| {
            let step = rk4_step(
                |s, x| sys.dynamics_unchecked(x, &nom.input_at(s), &zero_w),
                nom.times[k],
                &nom.x[k],
                nom.dt,
            );
            norm(&axpy(&step, -1.0, &nom.x[k + 1]))
        })
        .fold(0.0, f64::max)
}

/// Whether every state lies in `X`, with translation-invariant coordinates only
/// required to span no more than the width of `X`.
pub fn stays_in_state_set(sys: &ControlAffineSystem, states: &[Vec<f64>]) -> bool {
    let (lo, hi) = (sys.x_set.lower(), sys.x_set.upper());
    let inv = sys.translation_invariant();
    (0..sys.n()).all(|i| {
        let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in states {
            a = a.min(x[i]);
            b = b.max(x[i]);
        }
        if inv.contains(&i) {
            b - a <= hi[i] - lo[i]
        } else {
            a >= lo[i] && b <= hi[i]
        }
    })
}

/// Discrete LQR gain at `(x, u)` on a coarse design step, ignoring translation-invariant coordinates.
fn stabilizer_gain(sys: &ControlAffineSystem, x: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
    let (n, m) = (sys.n(), sys.m());
    let h = 0.05;
    let lin = sys.linearize(x)?;
    let a = DMatrix::identity(n, n) + lin.matrix_a(u, &vec![0.0; sys.l()]) * h;
    let b = &lin.b * h;
    let inv = sys.translation_invariant();
    let q = DMatrix::from_fn(
        n,
        n,
        |i, j| if i == j && !inv.contains(&i) { h } else { 0.0 },
    );
    let r = DMatrix::identity(m, m) * h;
    let mut p = q.clone();
    let mut k = DMatrix::zeros(m, n);
    for _ in 0..5000 {
        let btp = b.transpose() * &p;
        let s = &r + &btp * &b;
        let knew = s
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("stabilizer design failed"))?
            .solve(&(&btp * &a));
        let pnew = &q + a.transpose() * &p * (&a - &b * &knew);
        let pnew = (&pnew + pnew.transpose()) * 0.5;
        let done = (&pnew - &p).norm() <= 1e-10 * (1.0 + p.norm());
        p = pnew;
        k = knew;
        if done {
            break;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(invalid("stabilizer design diverged"));
    }
    Ok(k)
}

struct Excitation {
    terms: Vec<Vec<(f64, f64, f64)>>,
}

impl Excitation {
    fn sample(sys: &ControlAffineSystem, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = (sys.u_set.lower(), sys.u_set.upper());
        let terms = (0..sys.m())
            .map(|j| {
                let count = rng.random_range(1..=3usize);
                let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..=1.0)).collect();
                let total: f64 = raw.iter().sum::<f64>().max(1e-12);
                let budget = scale * 0.5 * (hi[j] - lo[j]);
                raw.iter()
                    .map(|r| {
                        let freq = rng.random_range(0.05..=0.5);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        (budget * r / total, std::f64::consts::TAU * freq, phase)
                    })
                    .collect()
            })
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|ch| ch.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum())
            .collect()
    }
}

/// Samples a nominal trajectory starting in `X_0` (or at `x0`) that stays in `X`.
///
/// The grid inputs are a sum of at most three sinusoids per channel on top of a
/// trim input and a linear stabilizer, clamped to `U`; the stored nominal is the
/// open-loop integration of their linear interpolant.
pub fn gen_nominal(
    sys: &ControlAffineSystem,
    horizon: f64,
    dt: f64,
    seed: u64,
    x0: Option<&[f64]>,
) -> Result<Nominal> {
    let times = grid(horizon, dt)?;
    if let Some(x) = x0 {
        if x.len() != sys.n() {
            return Err(invalid("initial nominal state has the wrong dimension"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_NOMINAL));
    let zero_w = vec![0.0; sys.l()];
    for attempt in 0..MAX_NOMINAL_ATTEMPTS {
        let start = match x0 {
            Some(x) => x.to_vec(),
            None => sys.x0_set.sample(&mut rng),
        };
        let scale = 0.3 * (1.0 - attempt as f64 / MAX_NOMINAL_ATTEMPTS as f64);
        let exc = Excitation::sample(sys, scale, &mut rng);
        let u_ref = sys.trim_input(&start);
        let Ok(gain) = stabilizer_gain(sys, &start, &u_ref) else {
            continue;
        };
        let inv = sys.translation_invariant();
        let policy = |t: f64, x: &[f64]| {
            let e = nalgebra::DVector::from_fn(sys.n(), |i, _| {
                if inv.contains(&i) {
                    0.0
                } else {
                    x[i] - start[i]
                }
            });
            let fb = &gain * e;
            let mut u: Vec<f64> = sys
                .trim_input(x)
                .iter()
                .zip(exc.at(t))
                .zip(fb.iter())
                .map(|((a, b), c)| a + b - c)
                .collect();
            sys.u_set.clamp(&mut u);
            u
        };
        let mut x = start.clone();
        let mut inputs = Vec::with_capacity(times.len());
        let mut ok = true;
        for (k, &t) in times.iter().enumerate() {
            inputs.push(policy(t, &x));
            if k + 1 == times.len() {
                break;
            }
            x = rk4_step(
                |s, y| sys.dynamics_unchecked(y, &policy(s, y), &zero_w),
                t,
                &x,
                dt,
            );
            if x.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let Ok(nom) = nominal_from_inputs(sys, &start, dt, inputs, seed) else {
            continue;
        };
        if stays_in_state_set(sys, &nom.x) {
            return Ok(nom);
        }
    }
    Err(Error::InfeasibleNominal {
        attempts: MAX_NOMINAL_ATTEMPTS,
    })
}

/// A closed-loop rollout sampled on the nominal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x_star: Vec<Vec<f64>>,
    pub u_star: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// `sup_{s ≤ t} ‖w(s)‖` including every integrator stage.
    pub w_sup: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub z_star: Vec<Vec<f64>>,
    pub seed: u64,
    pub sigma: f64,
    pub selector: String,
    pub left_state_set: bool,
}

impl Trajectory {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("trajectory has samples")
    }

    /// `‖x(t) − x*(t)‖` restricted to `coords`.
    pub fn error_norms(&self, coords: &[usize]) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.x_star)
            .map(|(a, b)| {
                coords
                    .iter()
                    .map(|&i| (a[i] - b[i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Closed-loop rollout with `u = controller_u(x, x*, u*)` at every RK4 stage.
pub fn rollout(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    nominal: &Nominal,
    dist: &DisturbanceSignal,
    x0: &[f64],
) -> Result<Trajectory> {
    let (n, m) = (sys.n(), sys.m());
    if x0.len() != n || dist.dim() != sys.l() || nominal.x[0].len() != n {
        return Err(invalid("rollout dimensions do not match the system"));
    }
    if ck.controller.n() != n || ck.controller.m() != m {
        return Err(invalid("checkpoint does not match the system"));
    }
    if sel.c.ncols() != n || sel.d.ncols() != m {
        return Err(invalid("selector does not match the system"));
    }
    let zero_w = vec![0.0; sys.l()];
    let ctl = &ck.controller;
    let rhs = |t: f64, xs: &[f64], x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let us = nominal.input_at(t);
        let u = ctl.u_unchecked(x, xs, &us);
        (
            sys.dynamics_unchecked(xs, &us, &zero_w),
            sys.dynamics_unchecked(x, &u, dist.value_at(t)),
        )
    };
    let dt = nominal.dt;
    let steps = nominal.steps();
    let mut traj = Trajectory {
        times: nominal.times.clone(),
        x_star: Vec::with_capacity(steps + 1),
        u_star: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps + 1),
        w_sup: Vec::with_capacity(steps + 1),
        z: Vec::with_capacity(steps + 1),
        z_star: Vec::with_capacity(steps + 1),
        seed: nominal.seed,
        sigma: dist.sigma,
        selector: sel.label.clone(),
        left_state_set: false,
    };
    let mut xs = nominal.x[0].clone();
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let t = nominal.times[k];
        let us = nominal.input_at(t);
        let u = ctl.u_unchecked(&x, &xs, &us);
        traj.z.push(sel.output(&x, &u));
        traj.z_star.push(sel.output(&xs, &us));
        traj.w.push(dist.value_at(t).to_vec());
        traj.w_sup.push(dist.sup_norm_until(t));
        traj.x_star.push(xs.clone());
        traj.u_star.push(us);
        traj.x.push(x.clone());
        traj.u.push(u);
        if k == steps {
            break;
        }
        let (a1, b1) = rhs(t, &xs, &x);
        let th = t + 0.5 * dt;
        let (a2, b2) = rhs(th, &axpy(&xs, 0.5 * dt, &a1), &axpy(&x, 0.5 * dt, &b1));
        let (a3, b3) = rhs(th, &axpy(&xs, 0.5 * dt, &a2), &axpy(&x, 0.5 * dt, &b2));
        let (a4, b4) = rhs(t + dt, &axpy(&xs, dt, &a3), &axpy(&x, dt, &b3));
        xs = rk4_combine(&xs, dt, [&a1, &a2, &a3, &a4]);
        x = rk4_combine(&x, dt, [&b1, &b2, &b3, &b4]);
        if x.iter().chain(&xs).any(|v| !v.is_finite()) || norm(&x) > DIVERGENCE_NORM {
            return Err(Error::Diverged { time: t + dt });
        }
    }
    traj.left_state_set = !stays_in_state_set(sys, &traj.x);
    if traj.left_state_set {
        log::warn!("rollout with seed {} left the state set", traj.seed);
    }
    Ok(traj)
}

/// Trapezoidal area under `‖x_e(t)‖ / T` restricted to `coords`.
pub fn total_tracking_error(traj: &Trajectory, coords: &[usize]) -> f64 {
    let e = traj.error_norms(coords);
    let horizon = traj.horizon();
    let area: f64 = traj
        .times
        .windows(2)
        .zip(e.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    area / horizon
}

/// Per-step `α·sup_{s ≤ t}‖w(s)‖ − ‖z(t) − z*(t)‖` and its minimum.
pub fn tube_margin(traj: &Trajectory, alpha: f64) -> (Vec<f64>, f64) {
    let margins: Vec<f64> = traj
        .z
        .iter()
        .zip(&traj.z_star)
        .zip(&traj.w_sup)
        .map(|((z, zs), ws)| alpha * ws - norm(&axpy(z, -1.0, zs)))
        .collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    (margins, worst)
}

/// Tube radius `√(w̄/w̲)·ε/λ` of a classical CCM controller.
pub fn ccm_tube_size(w_hi: f64, w_lo: f64, eps: f64, lambda: f64) -> Result<f64> {
    if !(w_hi > 0.0 && w_lo > 0.0 && eps > 0.0 && lambda > 0.0) {
        return Err(invalid("tube size inputs must be positive"));
    }
    Ok((w_hi / w_lo).sqrt() * eps / lambda)
}

/// Options shared by every rollout of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub sigma: f64,
    /// Start on the nominal when true, otherwise offset by a sample of `X_e0`.
    pub on_nominal: bool,
}

/// Runs one disturbed rollout per seed in parallel; results keep the order of `seeds`.
pub fn rollout_batch(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    nominal: &Nominal,
    seeds: &[u64],
    opts: BatchOptions,
) -> Vec<(u64, Result<Trajectory>)> {
    seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<Trajectory> {
                let dist = gen_disturbance(sys.l(), nominal.horizon(), opts.sigma, seed)?;
                let mut x0 = nominal.x[0].clone();
                if !opts.on_nominal {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_NOMINAL + 1));
                    for (v, e) in x0.iter_mut().zip(sys.xe0_set.sample(&mut rng)) {
                        *v += e;
                    }
                }
                let mut traj = rollout(sys, ck, sel, nominal, &dist, &x0)?;
                traj.seed = seed;
                Ok(traj)
            };
            (seed, run())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::tests::toy_checkpoint;
    use crate::certnets::{GainParams, Hyperparams};
    use crate::systems::{make_system, SelectorKind};
    use proptest::prelude::*;

    fn pvtol_checkpoint(seed: u64) -> (ControlAffineSystem, CertificateCheckpoint) {
        let sys = make_system("pvtol").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ck = CertificateCheckpoint::init(
            "pvtol",
            6,
            2,
            &sys.network_inputs(),
            Hyperparams {
                hidden: 16,
                c: 4,
                ..Default::default()
            },
            sys.training_selector(0.1).unwrap(),
            GainParams::from_alpha_mu(2.0, 0.5).unwrap(),
            &mut rng,
        )
        .unwrap();
        (sys, ck)
    }

    fn constant_nominal(sys: &ControlAffineSystem, x0: &[f64], u: &[f64], steps: usize) -> Nominal {
        nominal_from_inputs(sys, x0, DEFAULT_DT, vec![u.to_vec(); steps + 1], 0).unwrap()
    }

    #[test]
    fn disturbance_respects_ranges() {
        let d = gen_disturbance(2, 10.0, 1.0, 3).unwrap();
        assert_eq!(d.breakpoints[0], 0.0);
        assert!(*d.breakpoints.last().unwrap() <= 10.0);
        for w in d.breakpoints.windows(2) {
            assert!(w[1] - w[0] >= 0.0 && w[1] - w[0] <= 1.0);
        }
        for v in &d.values {
            let r = norm(v);
            assert!((0.1 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        assert_eq!(d, gen_disturbance(2, 10.0, 1.0, 3).unwrap());
        assert_ne!(d, gen_disturbance(2, 10.0, 1.0, 4).unwrap());
    }

    #[test]
    fn running_sup_is_monotone() {
        let d = gen_disturbance(3, 5.0, 2.0, 8).unwrap();
        let sups: Vec<f64> = (0..=500)
            .map(|k| d.sup_norm_until(k as f64 * 0.01))
            .collect();
        assert!(sups.windows(2).all(|w| w[1] >= w[0]));
        assert!((sups[0] - norm(&d.values[0])).abs() < 1e-15);
    }

    #[test]
    fn hover_nominal_is_constant() {
        let sys = make_system("pvtol").unwrap();
        let p = sys.pvtol_params().unwrap();
        let hover = p.m * p.g / 2.0;
        assert!((hover - 2.384).abs() < 1e-3);
        let x0 = [0.0; 6];
        let nom = constant_nominal(&sys, &x0, &[hover, hover], 1000);
        for x in &nom.x {
            assert!(norm(x) < 1e-12);
        }
        assert_eq!(nominal_residual(&sys, &nom), 0.0);
    }

    #[test]
    fn generated_nominal_starts_in_x0_and_stays_in_x() {
        let sys = make_system("pvtol").unwrap();
        for seed in 0..5 {
            let nom = gen_nominal(&sys, DEFAULT_HORIZON, DEFAULT_DT, seed, None).unwrap();
            assert!(sys.x0_set.contains(&nom.x[0]));
            assert!(stays_in_state_set(&sys, &nom.x));
            assert!(nom.u.iter().all(|u| sys.u_set.contains(u)));
            assert!(nominal_residual(&sys, &nom) <= 1e-6);
            assert_eq!(
                nom,
                gen_nominal(&sys, DEFAULT_HORIZON, DEFAULT_DT, seed, None).unwrap()
            );
        }
    }

    #[test]
    fn nominal_generation_gives_up_after_fifty_attempts() {
        let sys = make_system("pvtol").unwrap();
        let outside = [0.0, 0.0, 1.5, 0.0, 0.0, 0.0];
        assert!(matches!(
            gen_nominal(&sys, 2.0, DEFAULT_DT, 0, Some(&outside)),
            Err(Error::InfeasibleNominal { attempts: 50 })
        ));
    }

    #[test]
    fn exact_tracking_from_the_diagonal() {
        let (sys, ck) = pvtol_checkpoint(1);
        let sel = sys.output_selector(&SelectorKind::Positions).unwrap();
        let nom = gen_nominal(&sys, 5.0, DEFAULT_DT, 2, None).unwrap();
        let traj = rollout(
            &sys,
            &ck,
            &sel,
            &nom,
            &DisturbanceSignal::zero(sys.l()),
            &nom.x[0],
        )
        .unwrap();
        let worst = traj
            .error_norms(&(0..6).collect::<Vec<_>>())
            .into_iter()
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{worst}");
        assert_eq!(traj.x_star, nom.x);
        let (_, margin) = tube_margin(&traj, 1.0);
        assert!(margin >= -1e-6);
    }

    #[test]
    fn stored_outputs_recompute_bitwise() {
        let (sys, ck) = pvtol_checkpoint(3);
        let sel = sys.output_selector(&SelectorKind::Positions).unwrap();
        let nom = gen_nominal(&sys, 2.0, DEFAULT_DT, 4, None).unwrap();
        let dist = gen_disturbance(sys.l(), 2.0, 1.0, 5).unwrap();
        let traj = rollout(&sys, &ck, &sel, &nom, &dist, &nom.x[0]).unwrap();
        for k in 0..traj.times.len() {
            assert_eq!(traj.z[k], sel.output(&traj.x[k], &traj.u[k]));
            assert_eq!(traj.z_star[k], sel.output(&traj.x_star[k], &traj.u_star[k]));
        }
    }

    #[test]
    fn rk4_is_fourth_order_on_pvtol() {
        let (sys, ck) = pvtol_checkpoint(6);
        let sel = sys.output_selector(&SelectorKind::Positions).unwrap();
        let horizon = 2.0;
        let base = gen_nominal(&sys, horizon, 0.02, 7, None).unwrap();
        let mut x0 = base.x[0].clone();
        x0[2] += 0.05;
        x0[3] += 0.1;
        let zero = DisturbanceSignal::zero(sys.l());
        let terminal = |dt: f64| {
            let steps = (horizon / dt).round() as usize;
            let inputs = (0..=steps).map(|k| base.input_at(k as f64 * dt)).collect();
            let nom = nominal_from_inputs(&sys, &base.x[0], dt, inputs, 0).unwrap();
            rollout(&sys, &ck, &sel, &nom, &zero, &x0)
                .unwrap()
                .x
                .last()
                .unwrap()
                .clone()
        };
        let reference = terminal(0.02 / 100.0);
        let e1 = norm(&axpy(&terminal(0.02), -1.0, &reference));
        let e2 = norm(&axpy(&terminal(0.01), -1.0, &reference));
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn tracking_error_areas() {
        let n = 101;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.1).collect();
        let mk = |f: &dyn Fn(f64) -> f64| Trajectory {
            times: times.clone(),
            x_star: vec![vec![0.0]; n],
            u_star: vec![vec![0.0]; n],
            x: times.iter().map(|t| vec![f(*t)]).collect(),
            u: vec![vec![0.0]; n],
            w: vec![vec![0.0]; n],
            w_sup: vec![0.0; n],
            z: vec![vec![0.0]; n],
            z_star: vec![vec![0.0]; n],
            seed: 0,
            sigma: 1.0,
            selector: "x".into(),
            left_state_set: false,
        };
        assert!((total_tracking_error(&mk(&|_| 0.3), &[0]) - 0.3).abs() < 1e-12);
        assert!((total_tracking_error(&mk(&|t| t), &[0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ccm_tube_formula() {
        assert_eq!(ccm_tube_size(2.0, 2.0, 0.5, 0.5).unwrap(), 1.0);
        assert_eq!(ccm_tube_size(4.0, 1.0, 2.0, 0.5).unwrap(), 8.0);
        assert!(
            ccm_tube_size(9.0, 1.0, 1.0, 1.0).unwrap() > ccm_tube_size(4.0, 1.0, 1.0, 1.0).unwrap()
        );
        assert!(ccm_tube_size(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn scalar_toy_rollout_stays_in_gain_bound() {
        let ck = toy_checkpoint(0.5, 4.0, 1.0);
        let sys = crate::systems::scalar_toy().unwrap();
        let nom = constant_nominal(&sys, &[0.0], &[0.0], 1000);
        let sel = ck.selector.clone();
        let dist = gen_disturbance(1, 10.0, 1.0, 9).unwrap();
        let traj = rollout(&sys, &ck, &sel, &nom, &dist, &[0.0]).unwrap();
        assert!(tube_margin(&traj, 1.0).1 >= 0.0);
    }

    #[test]
    fn batch_is_ordered_and_deterministic() {
        let (sys, ck) = pvtol_checkpoint(10);
        let sel = sys.output_selector(&SelectorKind::Positions).unwrap();
        let nom = gen_nominal(&sys, 1.0, DEFAULT_DT, 11, None).unwrap();
        let opts = BatchOptions {
            sigma: 1.0,
            on_nominal: true,
        };
        let a = rollout_batch(&sys, &ck, &sel, &nom, &[5, 1, 3], opts);
        let b = rollout_batch(&sys, &ck, &sel, &nom, &[5, 1, 3], opts);
        assert_eq!(a.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 1, 3]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.1.as_ref().unwrap(), y.1.as_ref().unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn disturbance_invariants_hold(seed in any::<u64>(), sigma in 0.1f64..5.0, l in 1usize..4) {
            let d = gen_disturbance(l, 10.0, sigma, seed).unwrap();
            for w in d.breakpoints.windows(2) {
                prop_assert!(w[1] > w[0] - 1e-15 && w[1] - w[0] <= 1.0);
            }
            for v in &d.values {
                let r = norm(v);
                prop_assert!(r >= 0.1 - 1e-12 && r <= sigma + 1e-12);
            }
        }
    }
}
