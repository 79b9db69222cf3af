//! Tube-aware motion planning for the planar VTOL.
//!
//! Obstacles are inflated by the position tube plus the vehicle radius, A* on an
//! 8-connected occupancy grid finds a corridor, shortcutting reduces it to a few
//! waypoints, and each leg is flown rest-to-rest along a ninth-order smoothstep
//! so the path stays on the polyline and four derivatives vanish at every
//! waypoint. States and inputs follow from differential flatness.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use crate::certnets::CertificateCheckpoint;
use crate::error::{invalid, Error, Result};
use crate::simulation::{
    nominal_residual, rollout_batch, stays_in_state_set, BatchOptions, Nominal,
};
use crate::systems::{ControlAffineSystem, SelectorKind};

/// Obstacle scenario shipped with the crate.
pub const PACKAGED_SCENARIO: &str = include_str!("../data/pvtol_scenario.txt");
pub const GRID_RESOLUTION: f64 = 0.1;
pub const MAX_SLOWDOWN: f64 = 4.0;
pub const RESIDUAL_TOL: f64 = 1e-6;
const SLOWDOWNS: [f64; 7] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    fn clearance(&self, p: [f64; 2]) -> f64 {
        dist(p, self.center) - self.radius
    }
}

/// Planning problem in the `(p_x, p_z)` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    /// `[x_min, x_max, z_min, z_max]`.
    pub bounds: [f64; 4],
    pub vehicle_radius: f64,
    /// Peak speed along each leg before any slowdown.
    pub max_speed: f64,
    /// Position tube radius `α_p·σ`.
    pub position_tube: f64,
    /// Input tube radius `α_u·σ`.
    pub input_tube: f64,
}

fn numbers(line: usize, v: &str, count: usize) -> Result<Vec<f64>> {
    let out: Vec<f64> = v
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line,
            msg: format!("{e}"),
        })?;
    if out.len() != count || out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse {
            line,
            msg: format!("expected {count} finite numbers, found {v:?}"),
        });
    }
    Ok(out)
}

impl Scenario {
    /// Parses `key = value` lines; `obstacle = x z r` may repeat.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sc = Scenario {
            start: [f64::NAN; 2],
            goal: [f64::NAN; 2],
            obstacles: Vec::new(),
            bounds: [f64::NAN; 4],
            vehicle_radius: 0.0,
            max_speed: 1.0,
            position_tube: 0.0,
            input_tube: 0.0,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, found {t:?}"),
                });
            };
            match k.trim() {
                "start" => sc.start = numbers(line, v, 2)?.try_into().expect("two"),
                "goal" => sc.goal = numbers(line, v, 2)?.try_into().expect("two"),
                "bounds" => sc.bounds = numbers(line, v, 4)?.try_into().expect("four"),
                "vehicle_radius" => sc.vehicle_radius = numbers(line, v, 1)?[0],
                "max_speed" => sc.max_speed = numbers(line, v, 1)?[0],
                "position_tube" => sc.position_tube = numbers(line, v, 1)?[0],
                "input_tube" => sc.input_tube = numbers(line, v, 1)?[0],
                "obstacle" => {
                    let o = numbers(line, v, 3)?;
                    sc.obstacles.push(Obstacle {
                        center: [o[0], o[1]],
                        radius: o[2],
                    });
                }
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn packaged() -> Self {
        Self::parse(PACKAGED_SCENARIO).expect("packaged scenario parses")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s += &format!("start = {} {}\n", self.start[0], self.start[1]);
        s += &format!("goal = {} {}\n", self.goal[0], self.goal[1]);
        let b = self.bounds;
        s += &format!("bounds = {} {} {} {}\n", b[0], b[1], b[2], b[3]);
        s += &format!("vehicle_radius = {}\n", self.vehicle_radius);
        s += &format!("max_speed = {}\n", self.max_speed);
        s += &format!("position_tube = {}\n", self.position_tube);
        s += &format!("input_tube = {}\n", self.input_tube);
        for o in &self.obstacles {
            s += &format!("obstacle = {} {} {}\n", o.center[0], o.center[1], o.radius);
        }
        s
    }

    fn validate(&self) -> Result<()> {
        let finite = self
            .start
            .iter()
            .chain(&self.goal)
            .chain(&self.bounds)
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("scenario needs start, goal and bounds"));
        }
        let b = self.bounds;
        if !(b[0] < b[1] && b[2] < b[3]) {
            return Err(invalid("scenario bounds are empty"));
        }
        if self.vehicle_radius < 0.0 || self.position_tube < 0.0 || self.input_tube < 0.0 {
            return Err(invalid("radii must be nonnegative"));
        }
        if !(self.max_speed > 0.0) || self.obstacles.iter().any(|o| !(o.radius > 0.0)) {
            return Err(invalid("speed and obstacle radii must be positive"));
        }
        Ok(())
    }

    /// Copy with tube radii `scale·α·σ` from the checkpoint's refined position and input tubes.
    pub fn with_checkpoint_tubes(&self, ck: &CertificateCheckpoint, scale: f64) -> Result<Self> {
        let get = |label: &str| {
            ck.tubes
                .get(label)
                .map(|t| t.alpha)
                .ok_or_else(|| invalid(format!("checkpoint has no refined {label:?} tube")))
        };
        let sigma = ck.hyper.sigma;
        Ok(Self {
            position_tube: scale * get("positions")? * sigma,
            input_tube: scale * get("inputs")? * sigma,
            ..self.clone()
        })
    }

    fn inside_bounds(&self, p: [f64; 2]) -> bool {
        let b = self.bounds;
        p[0] >= b[0] && p[0] <= b[1] && p[1] >= b[2] && p[1] <= b[3]
    }

    /// Tube radius plus vehicle radius added to every obstacle.
    pub fn margin(&self) -> f64 {
        self.position_tube + self.vehicle_radius
    }
}

/// Obstacles grown by the position tube and the vehicle radius.
pub fn inflate_obstacles(sc: &Scenario) -> Result<Vec<Obstacle>> {
    let grow = sc.margin();
    let out: Vec<Obstacle> = sc
        .obstacles
        .iter()
        .map(|o| Obstacle {
            center: o.center,
            radius: o.radius + grow,
        })
        .collect();
    for (name, p) in [("start", sc.start), ("goal", sc.goal)] {
        if !sc.inside_bounds(p) {
            return Err(Error::InfeasibleScenario(format!(
                "{name} lies outside the bounds"
            )));
        }
        if out.iter().any(|o| o.clearance(p) < 0.0) {
            return Err(Error::InfeasibleScenario(format!(
                "{name} lies inside an inflated obstacle"
            )));
        }
    }
    Ok(out)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `c` to the segment `[a, b]`.
fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((c[0] - a[0]) * d[0] + (c[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    dist([a[0] + s * d[0], a[1] + s * d[1]], c)
}

fn segment_clear(a: [f64; 2], b: [f64; 2], obstacles: &[Obstacle]) -> bool {
    obstacles
        .iter()
        .all(|o| segment_distance(a, b, o.center) >= o.radius)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: (usize, usize),
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over the grid of cell centers; start and goal are joined to their nearest cells.
pub fn astar(sc: &Scenario, inflated: &[Obstacle], resolution: f64) -> Option<Vec<[f64; 2]>> {
    let b = sc.bounds;
    let nx = ((b[1] - b[0]) / resolution).floor() as usize + 1;
    let nz = ((b[3] - b[2]) / resolution).floor() as usize + 1;
    let center = |c: (usize, usize)| {
        [
            b[0] + c.0 as f64 * resolution,
            b[2] + c.1 as f64 * resolution,
        ]
    };
    let free: Vec<bool> = (0..nx * nz)
        .map(|k| {
            let p = center((k % nx, k / nx));
            inflated.iter().all(|o| o.clearance(p) >= 0.0)
        })
        .collect();
    let nearest = |p: [f64; 2]| -> Option<(usize, usize)> {
        let ci = ((p[0] - b[0]) / resolution)
            .round()
            .clamp(0.0, (nx - 1) as f64) as usize;
        let cj = ((p[1] - b[2]) / resolution)
            .round()
            .clamp(0.0, (nz - 1) as f64) as usize;
        let mut best: Option<((usize, usize), f64)> = None;
        for di in -2i64..=2 {
            for dj in -2i64..=2 {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= nx as i64 || j >= nz as i64 {
                    continue;
                }
                let c = (i as usize, j as usize);
                if !free[c.0 + c.1 * nx] || !segment_clear(p, center(c), inflated) {
                    continue;
                }
                let d = dist(p, center(c));
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
        }
        best.map(|(c, _)| c)
    };
    let s = nearest(sc.start)?;
    let g = nearest(sc.goal)?;
    let h = |c: (usize, usize)| dist(center(c), center(g));
    let mut heap = BinaryHeap::new();
    let mut cost: HashMap<(usize, usize), f64> = HashMap::new();
    let mut parent: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    cost.insert(s, 0.0);
    heap.push(Open {
        f: h(s),
        g: 0.0,
        cell: s,
    });
    while let Some(Open { g: gc, cell, .. }) = heap.pop() {
        if cell == g {
            let mut path = vec![center(g)];
            let mut c = g;
            while let Some(&p) = parent.get(&c) {
                path.push(center(p));
                c = p;
            }
            path.reverse();
            path.insert(0, sc.start);
            path.push(sc.goal);
            return Some(path);
        }
        if gc > cost[&cell] {
            continue;
        }
        for (di, dj) in [
            (-1i64, -1i64),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ] {
            let (i, j) = (cell.0 as i64 + di, cell.1 as i64 + dj);
            if i < 0 || j < 0 || i >= nx as i64 || j >= nz as i64 {
                continue;
            }
            let next = (i as usize, j as usize);
            if !free[next.0 + next.1 * nx] || !segment_clear(center(cell), center(next), inflated) {
                continue;
            }
            let ng = gc + resolution * ((di * di + dj * dj) as f64).sqrt();
            if cost.get(&next).is_none_or(|&old| ng < old) {
                cost.insert(next, ng);
                parent.insert(next, cell);
                heap.push(Open {
                    f: ng + h(next),
                    g: ng,
                    cell: next,
                });
            }
        }
    }
    None
}

/// Greedy shortcutting: from each kept point jump to the farthest visible one.
pub fn shortcut(path: &[[f64; 2]], obstacles: &[Obstacle]) -> Vec<[f64; 2]> {
    if path.len() <= 2 {
        return path.to_vec();
    }
    let mut out = vec![path[0]];
    let mut i = 0;
    while i + 1 < path.len() {
        let mut j = path.len() - 1;
        while j > i + 1 && !segment_clear(path[i], path[j], obstacles) {
            j -= 1;
        }
        out.push(path[j]);
        i = j;
    }
    out
}

/// `s(τ) = 126τ⁵ − 420τ⁶ + 540τ⁷ − 315τ⁸ + 70τ⁹`, with `s' = 630τ⁴(1 − τ)⁴`.
const SMOOTHSTEP: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.0, 126.0, -420.0, 540.0, -315.0, 70.0];
/// `max s'`.
const SMOOTHSTEP_PEAK_RATE: f64 = 630.0 / 256.0;

/// `s(τ)` and its first four derivatives on `[0, 1]`, clamped outside.
fn smoothstep(tau: f64) -> [f64; 5] {
    if tau <= 0.0 {
        return [0.0; 5];
    }
    if tau >= 1.0 {
        return [1.0, 0.0, 0.0, 0.0, 0.0];
    }
    let mut coef = SMOOTHSTEP.to_vec();
    let mut out = [0.0; 5];
    for d in out.iter_mut() {
        *d = coef.iter().rev().fold(0.0, |acc, c| acc * tau + c);
        coef = coef
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c)
            .collect();
    }
    out
}

/// Rest-to-rest legs between waypoints, each following `s(t / T_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpline {
    pub waypoints: Vec<[f64; 2]>,
    pub durations: Vec<f64>,
}

impl PathSpline {
    /// Leg durations chosen so the peak speed of every leg is `speed`.
    pub fn through(waypoints: Vec<[f64; 2]>, speed: f64) -> Result<Self> {
        if waypoints.len() < 2 || !(speed > 0.0) {
            return Err(invalid("a path needs two waypoints and a positive speed"));
        }
        let durations = waypoints
            .windows(2)
            .map(|w| (dist(w[0], w[1]) * SMOOTHSTEP_PEAK_RATE / speed).max(1.0))
            .collect();
        Ok(Self {
            waypoints,
            durations,
        })
    }

    pub fn slowed(&self, factor: f64) -> Self {
        Self {
            waypoints: self.waypoints.clone(),
            durations: self.durations.iter().map(|d| d * factor).collect(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Position and its first four time derivatives at `t`.
    pub fn eval(&self, t: f64) -> [[f64; 2]; 5] {
        let mut t0 = 0.0;
        let last = self.durations.len() - 1;
        for (k, &d) in self.durations.iter().enumerate() {
            if t < t0 + d || k == last {
                let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
                let s = smoothstep((t - t0) / d);
                let mut out = [[0.0; 2]; 5];
                for (i, o) in out.iter_mut().enumerate() {
                    let scale = d.powi(-(i as i32));
                    for c in 0..2 {
                        o[c] = if i == 0 {
                            a[c] + (b[c] - a[c]) * s[0]
                        } else {
                            (b[c] - a[c]) * s[i] * scale
                        };
                    }
                }
                return out;
            }
            t0 += d;
        }
        unreachable!("spline has at least one leg")
    }
}

/// State and input of the planar VTOL following the flat output `p(t)`.
///
/// Returns `None` when the required thrust direction degenerates.
pub fn flatness_state(
    sys: &ControlAffineSystem,
    d: &[[f64; 2]; 5],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let p = sys.pvtol_params()?;
    let [pos, vel, acc, jerk, snap] = *d;
    let (y1, y2) = (-acc[0], acc[1] + p.g);
    let (dy1, dy2) = (-jerk[0], jerk[1]);
    let (ddy1, ddy2) = (-snap[0], snap[1]);
    if !(y2 > 0.0) {
        return None;
    }
    let den = y1 * y1 + y2 * y2;
    let phi = y1.atan2(y2);
    let num = y2 * dy1 - y1 * dy2;
    let dphi = num / den;
    let dnum = y2 * ddy1 - y1 * ddy2;
    let dden = 2.0 * (y1 * dy1 + y2 * dy2);
    let ddphi = (dnum * den - num * dden) / (den * den);
    let thrust = p.m * den.sqrt();
    let diff = p.j * ddphi / p.l;
    let (s, c) = phi.sin_cos();
    let x = vec![
        pos[0],
        pos[1],
        phi,
        c * vel[0] + s * vel[1],
        -s * vel[0] + c * vel[1],
        dphi,
    ];
    Some((x, vec![0.5 * (thrust + diff), 0.5 * (thrust - diff)]))
}

/// Samples `(x*, u*)` along the spline on a grid of step `dt`, with `u̇*` by central differences.
pub fn flatness_nominal(
    sys: &ControlAffineSystem,
    spline: &PathSpline,
    dt: f64,
) -> Result<Nominal> {
    if sys.pvtol_params().is_none() {
        return Err(invalid("planning supports only the planar VTOL"));
    }
    let at = |t: f64| {
        flatness_state(sys, &spline.eval(t))
            .ok_or_else(|| Error::InfeasibleScenario("thrust vanishes along the path".into()))
    };
    let steps = (spline.duration() / dt).ceil() as usize;
    let h = 1e-4;
    let mut x = Vec::with_capacity(steps + 1);
    let mut u = Vec::with_capacity(steps + 1);
    let mut u_dot = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (xs, us) = at(t)?;
        let (tp, tm) = ((t + h).min(spline.duration()), (t - h).max(0.0));
        let (_, up) = at(tp)?;
        let (_, um) = at(tm)?;
        u_dot.push(
            up.iter()
                .zip(&um)
                .map(|(p, m)| (p - m) / (tp - tm))
                .collect(),
        );
        x.push(xs);
        u.push(us);
    }
    Ok(Nominal {
        dt,
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        x,
        u,
        u_dot: Some(u_dot),
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanFailure {
    NoCorridor,
    InputTube,
    /// Dynamics residual, state envelope or clearance still failing at the largest slowdown.
    Envelope,
}

impl fmt::Display for PlanFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoCorridor => "no-corridor",
            Self::InputTube => "input-tube",
            Self::Envelope => "envelope",
        })
    }
}

/// Outcome of the independent plan checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanChecks {
    pub min_clearance: f64,
    pub clearance_ok: bool,
    pub input_tube_ok: bool,
    pub residual: f64,
    pub residual_ok: bool,
    pub state_set_ok: bool,
}

impl PlanChecks {
    pub fn all(&self) -> bool {
        self.clearance_ok && self.input_tube_ok && self.residual_ok && self.state_set_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub scenario: Scenario,
    pub waypoints: Vec<[f64; 2]>,
    pub spline: Option<PathSpline>,
    pub nominal: Option<Nominal>,
    pub slowdown: f64,
    pub checks: Option<PlanChecks>,
    pub failure: Option<PlanFailure>,
}

impl PlanResult {
    pub fn feasible(&self) -> bool {
        self.failure.is_none()
    }
}

/// Clearance, input tube, dynamics residual and state-set checks of a nominal.
pub fn check_plan(sys: &ControlAffineSystem, sc: &Scenario, nom: &Nominal) -> PlanChecks {
    let margin = sc.margin();
    let min_clearance = nom
        .x
        .iter()
        .flat_map(|x| sc.obstacles.iter().map(move |o| o.clearance([x[0], x[1]])))
        .fold(f64::INFINITY, f64::min);
    let (lo, hi) = (sys.u_set.lower(), sys.u_set.upper());
    let input_tube_ok = nom.u.iter().all(|u| {
        u.iter()
            .enumerate()
            .all(|(j, v)| *v - sc.input_tube >= lo[j] && *v + sc.input_tube <= hi[j])
    });
    let in_bounds = nom.x.iter().all(|x| sc.inside_bounds([x[0], x[1]]));
    let residual = nominal_residual(sys, nom);
    PlanChecks {
        min_clearance,
        clearance_ok: min_clearance >= margin - 1e-9 && in_bounds,
        input_tube_ok,
        residual,
        residual_ok: residual <= RESIDUAL_TOL,
        state_set_ok: stays_in_state_set(sys, &nom.x),
    }
}

/// Plans a nominal whose position tube avoids the obstacles and whose input tube stays in `U`.
pub fn plan(sc: &Scenario, sys: &ControlAffineSystem, dt: f64) -> Result<PlanResult> {
    if sys.pvtol_params().is_none() {
        return Err(invalid("planning supports only the planar VTOL"));
    }
    let inflated = inflate_obstacles(sc)?;
    let mut result = PlanResult {
        scenario: sc.clone(),
        waypoints: Vec::new(),
        spline: None,
        nominal: None,
        slowdown: 1.0,
        checks: None,
        failure: Some(PlanFailure::NoCorridor),
    };
    let Some(path) = astar(sc, &inflated, GRID_RESOLUTION) else {
        return Ok(result);
    };
    let waypoints = shortcut(&path, &inflated);
    result.waypoints = waypoints.clone();
    let base = PathSpline::through(waypoints, sc.max_speed)?;
    for &factor in &SLOWDOWNS {
        let spline = base.slowed(factor);
        let nominal = match flatness_nominal(sys, &spline, dt) {
            Ok(n) => n,
            Err(Error::InfeasibleScenario(_)) => {
                result.failure = Some(PlanFailure::Envelope);
                continue;
            }
            Err(e) => return Err(e),
        };
        let checks = check_plan(sys, sc, &nominal);
        result.slowdown = factor;
        result.spline = Some(spline);
        result.checks = Some(checks);
        result.nominal = Some(nominal);
        if checks.all() {
            result.failure = None;
            return Ok(result);
        }
        result.failure = Some(if checks.input_tube_ok {
            PlanFailure::Envelope
        } else {
            PlanFailure::InputTube
        });
    }
    Ok(result)
}

/// Disturbed replays of a planned nominal starting on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub runs: usize,
    pub collisions: usize,
    pub diverged: usize,
    /// Smallest distance from the vehicle boundary to an uninflated obstacle.
    pub min_clearance: f64,
    /// Largest position deviation from the nominal.
    pub max_deviation: f64,
}

pub fn replay(
    plan: &PlanResult,
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    seeds: &[u64],
    sigma: f64,
) -> Result<ReplaySummary> {
    let nominal = plan
        .nominal
        .as_ref()
        .ok_or_else(|| invalid("plan has no nominal"))?;
    let sel = sys.output_selector(&SelectorKind::Positions)?;
    let runs = rollout_batch(
        sys,
        ck,
        &sel,
        nominal,
        seeds,
        BatchOptions {
            sigma,
            on_nominal: true,
        },
    );
    let sc = &plan.scenario;
    let mut out = ReplaySummary {
        runs: seeds.len(),
        collisions: 0,
        diverged: 0,
        min_clearance: f64::INFINITY,
        max_deviation: 0.0,
    };
    for (_, r) in runs {
        let Ok(traj) = r else {
            out.diverged += 1;
            out.collisions += 1;
            continue;
        };
        let mut hit = false;
        for (x, xs) in traj.x.iter().zip(&traj.x_star) {
            let p = [x[0], x[1]];
            for o in &sc.obstacles {
                let c = o.clearance(p) - sc.vehicle_radius;
                out.min_clearance = out.min_clearance.min(c);
                hit |= c < 0.0;
            }
            out.max_deviation = out.max_deviation.max(dist(p, [xs[0], xs[1]]));
        }
        out.collisions += hit as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use crate::systems::make_system;

    fn open_scenario() -> Scenario {
        Scenario::parse("start = 0 0\ngoal = 6 2\nbounds = -1 7 -1 3\nvehicle_radius = 0.1\n")
            .unwrap()
    }

    #[test]
    fn inflation_is_additive() {
        let mut sc = open_scenario();
        sc.obstacles.push(Obstacle {
            center: [3.0, 1.0],
            radius: 1.0,
        });
        sc.position_tube = 0.5;
        let inf = inflate_obstacles(&sc).unwrap();
        assert!((inf[0].radius - 1.6).abs() < 1e-12);
        sc.position_tube = 0.0;
        assert!((inflate_obstacles(&sc).unwrap()[0].radius - 1.1).abs() < 1e-12);
        sc.position_tube = 5.0;
        assert!(matches!(
            inflate_obstacles(&sc),
            Err(Error::InfeasibleScenario(_))
        ));
    }

    #[test]
    fn empty_map_gives_straight_line() {
        let sc = open_scenario();
        let path = astar(&sc, &[], GRID_RESOLUTION).unwrap();
        assert_eq!(shortcut(&path, &[]), vec![sc.start, sc.goal]);
    }

    #[test]
    fn astar_routes_around_an_obstacle() {
        let mut sc = open_scenario();
        sc.goal = [6.0, 0.0];
        sc.bounds = [-1.0, 7.0, -3.0, 3.0];
        sc.obstacles.push(Obstacle {
            center: [3.0, 0.0],
            radius: 1.0,
        });
        let inf = inflate_obstacles(&sc).unwrap();
        let path = astar(&sc, &inf, GRID_RESOLUTION).unwrap();
        for w in path.windows(2) {
            assert!(segment_clear(w[0], w[1], &inf));
        }
        let short = shortcut(&path, &inf);
        assert!(short.len() >= 3 && short.len() < path.len());
        let len: f64 = path.windows(2).map(|w| dist(w[0], w[1])).sum();
        assert!(len < 2.0 * 6.0);
    }

    #[test]
    fn smoothstep_derivatives_are_consistent() {
        for tau in [0.1, 0.3, 0.5, 0.77] {
            let s = smoothstep(tau);
            let h = 1e-6;
            for i in 0..4 {
                let fd = (smoothstep(tau + h)[i] - smoothstep(tau - h)[i]) / (2.0 * h);
                assert!(
                    (fd - s[i + 1]).abs() < 1e-4 * (1.0 + fd.abs()),
                    "order {i} at {tau}"
                );
            }
            assert!((s[1] - 630.0 * tau.powi(4) * (1.0 - tau).powi(4)).abs() < 1e-9);
        }
        assert_eq!(smoothstep(0.0), [0.0; 5]);
        assert_eq!(smoothstep(1.0), [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((smoothstep(0.5)[1] - SMOOTHSTEP_PEAK_RATE).abs() < 1e-12);
    }

    #[test]
    fn constant_position_gives_hover() {
        let sys = make_system("pvtol").unwrap();
        let p = sys.pvtol_params().unwrap();
        let mut d = [[0.0; 2]; 5];
        d[0] = [1.0, 2.0];
        let (x, u) = flatness_state(&sys, &d).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let hover = p.m * p.g / 2.0;
        assert!((u[0] - hover).abs() < 1e-12 && (u[1] - hover).abs() < 1e-12);
    }

    #[test]
    fn flatness_state_satisfies_dynamics() {
        let sys = make_system("pvtol").unwrap();
        let spline = PathSpline::through(vec![[0.0, 0.0], [3.0, 1.0], [4.0, -1.0]], 1.0).unwrap();
        for t in [0.4, 1.7, 3.3, 5.9] {
            let (x, u) = flatness_state(&sys, &spline.eval(t)).unwrap();
            let xdot = sys.dynamics(&x, &u, &[0.0]).unwrap();
            let path = |tt: &[f64]| {
                let (y, _) = flatness_state(&sys, &spline.eval(tt[0])).unwrap();
                y
            };
            let fd = central_difference(path, &[t], 1e-5);
            for i in 0..6 {
                assert!(
                    (xdot[i] - fd[(i, 0)]).abs() < 1e-5 * (1.0 + fd[(i, 0)].abs()),
                    "t {t} i {i}"
                );
            }
        }
    }

    #[test]
    fn slow_straight_line_is_near_hover() {
        let sys = make_system("pvtol").unwrap();
        let p = sys.pvtol_params().unwrap();
        let spline = PathSpline::through(vec![[0.0, 0.0], [2.0, 0.0]], 0.1).unwrap();
        let nom = flatness_nominal(&sys, &spline, 0.01).unwrap();
        let hover = p.m * p.g / 2.0;
        for (x, u) in nom.x.iter().zip(&nom.u) {
            assert!(x[2].abs() < 0.01);
            assert!((u[0] - hover).abs() < 0.01 && (u[1] - hover).abs() < 0.01);
        }
        assert!(nominal_residual(&sys, &nom) <= RESIDUAL_TOL);
    }

    #[test]
    fn residual_check_catches_corrupted_input() {
        let sys = make_system("pvtol").unwrap();
        let spline = PathSpline::through(vec![[0.0, 0.0], [1.0, 0.5]], 0.5).unwrap();
        let mut nom = flatness_nominal(&sys, &spline, 0.01).unwrap();
        assert!(nominal_residual(&sys, &nom) <= RESIDUAL_TOL);
        for u in nom.u.iter_mut().skip(100).take(1) {
            u[0] *= 1.01;
        }
        assert!(nominal_residual(&sys, &nom) > RESIDUAL_TOL);
    }

    #[test]
    fn planning_is_deterministic_and_checked() {
        let sys = make_system("pvtol").unwrap();
        let mut sc = open_scenario();
        sc.obstacles.push(Obstacle {
            center: [3.0, 1.0],
            radius: 0.6,
        });
        sc.position_tube = 0.2;
        sc.input_tube = 0.3;
        let a = plan(&sc, &sys, 0.01).unwrap();
        assert!(a.feasible(), "{:?}", a.failure);
        let c = check_plan(&sys, &sc, a.nominal.as_ref().unwrap());
        assert!(c.all());
        assert_eq!(a, plan(&sc, &sys, 0.01).unwrap());
        sc.input_tube = 1.5;
        assert_eq!(
            plan(&sc, &sys, 0.01).unwrap().failure,
            Some(PlanFailure::InputTube)
        );
    }

    #[test]
    fn closed_wall_has_no_corridor() {
        let sys = make_system("pvtol").unwrap();
        let mut sc = open_scenario();
        sc.goal = [6.0, 0.0];
        for z in [-1.0, 0.0, 1.0, 2.0, 3.0] {
            sc.obstacles.push(Obstacle {
                center: [3.0, z],
                radius: 0.6,
            });
        }
        assert_eq!(
            plan(&sc, &sys, 0.01).unwrap().failure,
            Some(PlanFailure::NoCorridor)
        );
    }

    #[test]
    fn scenario_text_round_trips() {
        let sc = Scenario::packaged();
        assert_eq!(Scenario::parse(&sc.to_text()).unwrap(), sc);
        assert!(Scenario::parse("start = 1\n").is_err());
        assert!(Scenario::parse("start = 0 0\ngoal = 1 1\nbounds = 0 1 0 1\nfoo = 2\n").is_err());
    }
}
