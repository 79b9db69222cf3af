//! Statistical violation rates and Lipschitz-grid certification.
//!
//! Grids and bounds live on the flattened sample space `(x, x*, u*, w)`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certificates::{certificate_matrices, SamplePoint};
use crate::certnets::CertificateCheckpoint;
use crate::error::{invalid, Error, Result};
use crate::numerics::{lambda_max, random_unit_vector, spectral_norm};
use crate::systems::{ControlAffineSystem, OutputSelector};
use crate::training::sample_dataset;

/// `C4` counts as violated above this Frobenius norm.
pub const C4_TOLERANCE: f64 = 1e-6;
/// Multiplier applied to sampled suprema.
pub const SAMPLED_SAFETY: f64 = 1.5;
pub const DEFAULT_GRID_CAP: usize = 2_000_000;

/// Fractions of samples on which each inequality fails.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViolationRates {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub samples: usize,
}

/// Violation fractions on `n` fresh samples drawn with `seed`.
pub fn violation_rate(
    ck: &CertificateCheckpoint,
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    n: usize,
    seed: u64,
) -> Result<ViolationRates> {
    if n == 0 {
        return Err(invalid("violation_rate needs at least one sample"));
    }
    let data = sample_dataset(sys, n, seed);
    let flags: Vec<[bool; 4]> = data
        .par_iter()
        .map(|s| {
            let mats = certificate_matrices(sys, ck, sel, s)?;
            let mut f = [
                lambda_max(&mats.c1)? >= 0.0,
                lambda_max(&mats.c2.neg())? > 0.0,
                false,
                false,
            ];
            if let Some(c3) = &mats.c3 {
                f[2] = lambda_max(c3)? >= 0.0;
                f[3] = mats.c4.iter().any(|c| c.frobenius_norm() > C4_TOLERANCE);
            }
            Ok(f)
        })
        .collect::<Result<_>>()?;
    let frac = |k: usize| flags.iter().filter(|f| f[k]).count() as f64 / n as f64;
    Ok(ViolationRates {
        c1: frac(0),
        c2: frac(1),
        c3: frac(2),
        c4: frac(3),
        samples: n,
    })
}

/// Box over the flattened sample space; coordinates with equal bounds are held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub label: String,
}

impl Region {
    pub fn new(label: impl Into<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("region bounds must have equal nonzero length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
        {
            return Err(invalid("region needs finite lower <= upper"));
        }
        Ok(Self {
            lower,
            upper,
            label: label.into(),
        })
    }

    /// Varies `x` over the state set with `x*`, `u*` and `w` fixed.
    pub fn tracking_slice(
        sys: &ControlAffineSystem,
        x_star: &[f64],
        u_star: &[f64],
        w: &[f64],
    ) -> Result<Self> {
        let mut lower = sys.x_set.lower().to_vec();
        let mut upper = sys.x_set.upper().to_vec();
        for v in [x_star, u_star, w] {
            lower.extend_from_slice(v);
            upper.extend_from_slice(v);
        }
        let r = Self::new("tracking_slice", lower, upper)?;
        r.check(sys)?;
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn active_axes(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&i| self.upper[i] > self.lower[i])
            .collect()
    }

    pub fn check(&self, sys: &ControlAffineSystem) -> Result<()> {
        let (n, m, l) = (sys.n(), sys.m(), sys.l());
        if self.dim() != 2 * n + m + l {
            return Err(invalid(format!(
                "region has dim {}, expected {}",
                self.dim(),
                2 * n + m + l
            )));
        }
        let inside = |set: &crate::systems::BoxSet, off: usize| {
            (0..set.dim()).all(|i| {
                self.lower[off + i] >= set.lower()[i] && self.upper[off + i] <= set.upper()[i]
            })
        };
        if !inside(&sys.x_set, 0) || !inside(&sys.x_set, n) || !inside(&sys.u_set, 2 * n) {
            return Err(invalid("region leaves the system sets"));
        }
        let wmax: f64 = (0..l)
            .map(|i| {
                let a = self.lower[2 * n + m + i]
                    .abs()
                    .max(self.upper[2 * n + m + i].abs());
                a * a
            })
            .sum::<f64>()
            .sqrt();
        if wmax > sys.sigma * (1.0 + 1e-12) {
            return Err(invalid("region disturbance exceeds the sigma ball"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.random_range(l..=u) } else { l })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "label = {}\nlower = {}\nupper = {}\n",
            self.label,
            join(&self.lower),
            join(&self.upper)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg = crate::config::Config::parse(text)?;
        let vec = |k: &str| -> Result<Vec<f64>> {
            cfg.get(k)
                .ok_or_else(|| invalid(format!("region file lacks `{k}`")))?
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| invalid(format!("bad number {t:?} in `{k}`")))
                })
                .collect()
        };
        Self::new(
            cfg.get("label").unwrap_or("region"),
            vec("lower")?,
            vec("upper")?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Rigorous,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bound {
    pub value: f64,
    pub provenance: Provenance,
    pub note: &'static str,
}

impl Bound {
    pub fn rigorous(value: f64, note: &'static str) -> Self {
        Self {
            value,
            provenance: Provenance::Rigorous,
            note,
        }
    }

    pub fn sampled(value: f64) -> Self {
        Self {
            value,
            provenance: Provenance::Sampled,
            note: "sampled supremum x1.5",
        }
    }

    fn exact(value: f64) -> Self {
        Self::rigorous(value, "given")
    }
}

/// Sup-norm bounds `S_*` and Lipschitz constants `L_*` over a region.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSet {
    pub s_m: Bound,
    pub s_a: Bound,
    pub s_b: Bound,
    pub s_c: Bound,
    pub s_d: Bound,
    pub s_bw: Bound,
    pub s_k: Bound,
    pub l_mdot: Bound,
    pub l_m: Bound,
    pub l_a: Bound,
    pub l_b: Bound,
    pub l_bw: Bound,
    pub l_k: Bound,
    pub l_w: Bound,
}

impl BoundSet {
    /// Every entry set to `v`, tagged as given.
    pub fn uniform(v: f64) -> Self {
        Self {
            s_m: Bound::exact(v),
            s_a: Bound::exact(v),
            s_b: Bound::exact(v),
            s_c: Bound::exact(v),
            s_d: Bound::exact(v),
            s_bw: Bound::exact(v),
            s_k: Bound::exact(v),
            l_mdot: Bound::exact(v),
            l_m: Bound::exact(v),
            l_a: Bound::exact(v),
            l_b: Bound::exact(v),
            l_bw: Bound::exact(v),
            l_k: Bound::exact(v),
            l_w: Bound::exact(v),
        }
    }

    pub fn entries(&self) -> [(&'static str, &Bound); 14] {
        [
            ("S_M", &self.s_m),
            ("S_A", &self.s_a),
            ("S_B", &self.s_b),
            ("S_C", &self.s_c),
            ("S_D", &self.s_d),
            ("S_Bw", &self.s_bw),
            ("S_K", &self.s_k),
            ("L_Mdot", &self.l_mdot),
            ("L_M", &self.l_m),
            ("L_A", &self.l_a),
            ("L_B", &self.l_b),
            ("L_Bw", &self.l_bw),
            ("L_K", &self.l_k),
            ("L_W", &self.l_w),
        ]
    }

    pub fn all_rigorous(&self) -> bool {
        self.entries()
            .iter()
            .all(|(_, b)| b.provenance == Provenance::Rigorous)
    }

    /// Lipschitz constant of `λ_max` of the robust contraction matrix.
    pub fn l_eq10(&self, lambda: f64, mu: f64) -> f64 {
        let (sm, sa, sb, sk, sbw) = (
            self.s_m.value,
            self.s_a.value,
            self.s_b.value,
            self.s_k.value,
            self.s_bw.value,
        );
        let (lm, la, lb, lk) = (
            self.l_m.value,
            self.l_a.value,
            self.l_b.value,
            self.l_k.value,
        );
        self.l_mdot.value
            + 2.0
                * (sm * la
                    + sa * lm
                    + sm * sb * lk
                    + sb * sk * lm
                    + sm * sk * lb
                    + lambda / 2.0 * lm
                    + sm * lm * sbw * sbw / mu)
    }

    /// Lipschitz constant of `λ_max` of the negated output-gain matrix.
    pub fn l_eq11(&self, lambda: f64, alpha: f64) -> f64 {
        let (sc, sd, sk, lk) = (
            self.s_c.value,
            self.s_d.value,
            self.s_k.value,
            self.l_k.value,
        );
        lambda * self.l_m.value + 2.0 / alpha * sc * sd * lk + 4.0 / alpha * sk * sd * sd * lk
    }
}

struct PointQuantities {
    m: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    bw: DMatrix<f64>,
    k: DMatrix<f64>,
    w: DMatrix<f64>,
    m_dot: DMatrix<f64>,
}

fn quantities(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    flat: &[f64],
) -> Result<PointQuantities> {
    let s = SamplePoint::unflatten(sys, flat)?;
    let c = certificate_matrices(sys, ck, sel, &s)?;
    Ok(PointQuantities {
        m: c.m,
        a: c.a,
        b: sys.b_matrix(&s.x),
        bw: sys.bw_matrix(&s.x),
        k: c.k,
        w: c.w,
        m_dot: c.m_dot,
    })
}

/// Bounds over `region`: rigorous where a closed form exists, sampled otherwise.
pub fn lipschitz_constants(
    ck: &CertificateCheckpoint,
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    region: &Region,
    samples: usize,
    seed: u64,
) -> Result<BoundSet> {
    region.check(sys)?;
    let w_floor = ck.metric.w_floor;
    let net = &ck.metric.net;
    let l_w = 2.0 * net.output_norm_bound() * net.lipschitz_bound();
    let active = region.active_axes();
    let scale = region
        .lower
        .iter()
        .zip(&region.upper)
        .map(|(l, u)| u - l)
        .fold(0.0, f64::max)
        .max(1e-3);
    let delta = 1e-5 * scale;

    let per_sample: Vec<[f64; 12]> = (0..samples.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let p = region.sample(&mut rng);
            let q0 = quantities(sys, ck, sel, &p)?;
            let mut sup = [
                spectral_norm(&q0.a),
                spectral_norm(&q0.b),
                spectral_norm(&q0.bw),
                spectral_norm(&q0.k),
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
            ];
            if active.is_empty() {
                return Ok(sup);
            }
            let dir = random_unit_vector(active.len(), &mut rng);
            let mut p1 = p.clone();
            for (&ax, d) in active.iter().zip(&dir) {
                p1[ax] += delta * d;
            }
            if active
                .iter()
                .any(|&ax| p1[ax] > region.upper[ax] || p1[ax] < region.lower[ax])
            {
                for (&ax, d) in active.iter().zip(&dir) {
                    p1[ax] = p[ax] - delta * d;
                }
            }
            let q1 = quantities(sys, ck, sel, &p1)?;
            let ratio = |a: &DMatrix<f64>, b: &DMatrix<f64>| spectral_norm(&(a - b)) / delta;
            sup[4] = ratio(&q0.m_dot, &q1.m_dot);
            sup[5] = ratio(&q0.m, &q1.m);
            sup[6] = ratio(&q0.a, &q1.a);
            sup[7] = ratio(&q0.b, &q1.b);
            sup[8] = ratio(&q0.bw, &q1.bw);
            sup[9] = ratio(&q0.k, &q1.k);
            sup[10] = ratio(&q0.w, &q1.w);
            Ok(sup)
        })
        .collect::<Result<_>>()?;
    let mut sup = [0.0f64; 12];
    for s in &per_sample {
        for (a, b) in sup.iter_mut().zip(s) {
            *a = a.max(*b);
        }
    }
    let sampled = |v: f64| Bound::sampled(SAMPLED_SAFETY * v);
    let l_m_rig = l_w / (w_floor * w_floor);
    Ok(BoundSet {
        s_m: Bound::rigorous(1.0 / w_floor, "W >= w_floor I implies |M| <= 1/w_floor"),
        s_a: sampled(sup[0]),
        s_b: if sys.has_constant_b() {
            Bound::rigorous(sup[1], "constant input matrix")
        } else {
            sampled(sup[1])
        },
        s_c: Bound::rigorous(spectral_norm(&sel.c), "selector matrix norm"),
        s_d: Bound::rigorous(spectral_norm(&sel.d), "selector matrix norm"),
        s_bw: if sys.has_constant_bw() {
            Bound::rigorous(sup[2], "constant disturbance matrix")
        } else {
            sampled(sup[2])
        },
        s_k: sampled(sup[3]),
        l_mdot: sampled(sup[4]),
        l_m: Bound::rigorous(l_m_rig, "L_W / w_floor^2"),
        l_a: sampled(sup[6]),
        l_b: if sys.has_constant_b() {
            Bound::rigorous(0.0, "constant input matrix")
        } else {
            sampled(sup[7])
        },
        l_bw: if sys.has_constant_bw() {
            Bound::rigorous(0.0, "constant disturbance matrix")
        } else {
            sampled(sup[8])
        },
        l_k: sampled(sup[9]),
        l_w: Bound::rigorous(l_w, "2 sup|C| Lip(C) from layer operator norms"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub inequality: u8,
    pub value: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub region: Region,
    pub tau: f64,
    pub points: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub mu: f64,
    pub bounds: BoundSet,
    pub l_eq10: f64,
    pub l_eq11: f64,
    pub grid_max_c1: f64,
    pub grid_max_c2: f64,
    pub pass_c1: bool,
    pub pass_c2: bool,
    pub rigorous: bool,
    pub offenders: Vec<Offender>,
    pub rates: Option<ViolationRates>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.pass_c1 && self.pass_c2
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = |x: &[f64]| {
            x.iter()
                .map(|a| format!("{a:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(s, "region = {}", self.region.label).ok();
        writeln!(s, "lower = {}", v(&self.region.lower)).ok();
        writeln!(s, "upper = {}", v(&self.region.upper)).ok();
        for (k, x) in [
            ("tau", self.tau),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("mu", self.mu),
            ("l_eq10", self.l_eq10),
            ("l_eq11", self.l_eq11),
            ("grid_max_c1", self.grid_max_c1),
            ("grid_max_c2", self.grid_max_c2),
        ] {
            writeln!(s, "{k} = {x:e}").ok();
        }
        writeln!(s, "points = {}", self.points).ok();
        writeln!(s, "pass_c1 = {}", self.pass_c1).ok();
        writeln!(s, "pass_c2 = {}", self.pass_c2).ok();
        writeln!(s, "rigorous = {}", self.rigorous).ok();
        for (name, b) in self.bounds.entries() {
            let tag = match b.provenance {
                Provenance::Rigorous => "rigorous",
                Provenance::Sampled => "sampled",
            };
            writeln!(s, "bound.{name} = {:e} {tag}", b.value).ok();
        }
        if let Some(r) = &self.rates {
            writeln!(
                s,
                "rate.c1 = {:e}\nrate.c2 = {:e}\nrate.c3 = {:e}\nrate.c4 = {:e}\nrate.samples = {}",
                r.c1, r.c2, r.c3, r.c4, r.samples
            )
            .ok();
        }
        for (i, o) in self.offenders.iter().enumerate() {
            writeln!(
                s,
                "offender.{i} = C{} {:e} {}",
                o.inequality,
                o.value,
                v(&o.point)
            )
            .ok();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg = crate::config::Config::parse(text)?;
        let get = |k: &str| {
            cfg.get(k)
                .ok_or_else(|| invalid(format!("report lacks `{k}`")))
        };
        let num =
            |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| invalid(format!("bad `{k}`"))) };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| invalid(format!("bad `{k}`")))
        };
        let vec = |t: &str| -> Result<Vec<f64>> {
            t.split_whitespace()
                .map(|x| x.parse().map_err(|_| invalid(format!("bad number {x:?}"))))
                .collect()
        };
        let region = Region::new(get("region")?, vec(get("lower")?)?, vec(get("upper")?)?)?;
        let bound = |name: &str| -> Result<Bound> {
            let t = get(&format!("bound.{name}"))?;
            let (val, tag) = t.split_once(' ').ok_or_else(|| invalid("bad bound line"))?;
            let value = val.parse().map_err(|_| invalid("bad bound value"))?;
            Ok(match tag {
                "rigorous" => Bound::rigorous(value, "loaded"),
                "sampled" => Bound::sampled(value),
                _ => return Err(invalid(format!("unknown provenance {tag:?}"))),
            })
        };
        let bounds = BoundSet {
            s_m: bound("S_M")?,
            s_a: bound("S_A")?,
            s_b: bound("S_B")?,
            s_c: bound("S_C")?,
            s_d: bound("S_D")?,
            s_bw: bound("S_Bw")?,
            s_k: bound("S_K")?,
            l_mdot: bound("L_Mdot")?,
            l_m: bound("L_M")?,
            l_a: bound("L_A")?,
            l_b: bound("L_B")?,
            l_bw: bound("L_Bw")?,
            l_k: bound("L_K")?,
            l_w: bound("L_W")?,
        };
        let rates = match cfg.get("rate.samples") {
            Some(n) => Some(ViolationRates {
                c1: num("rate.c1")?,
                c2: num("rate.c2")?,
                c3: num("rate.c3")?,
                c4: num("rate.c4")?,
                samples: n.parse().map_err(|_| invalid("bad rate.samples"))?,
            }),
            None => None,
        };
        let mut offenders = Vec::new();
        while let Some(t) = cfg.get(&format!("offender.{}", offenders.len())) {
            let mut it = t.splitn(3, ' ');
            let which = it
                .next()
                .and_then(|w| w.strip_prefix('C'))
                .and_then(|w| w.parse().ok());
            let value = it.next().and_then(|w| w.parse().ok());
            let (Some(inequality), Some(value)) = (which, value) else {
                return Err(invalid("bad offender line"));
            };
            offenders.push(Offender {
                inequality,
                value,
                point: vec(it.next().unwrap_or(""))?,
            });
        }
        Ok(Self {
            region,
            tau: num("tau")?,
            points: get("points")?.parse().map_err(|_| invalid("bad points"))?,
            lambda: num("lambda")?,
            alpha: num("alpha")?,
            mu: num("mu")?,
            bounds,
            l_eq10: num("l_eq10")?,
            l_eq11: num("l_eq11")?,
            grid_max_c1: num("grid_max_c1")?,
            grid_max_c2: num("grid_max_c2")?,
            pass_c1: flag("pass_c1")?,
            pass_c2: flag("pass_c2")?,
            rigorous: flag("rigorous")?,
            offenders,
            rates,
        })
    }
}

/// Grid spacing whose covering radius over `d` active axes equals `tau`.
pub fn grid_spacing(tau: f64, active: usize) -> f64 {
    2.0 * tau / (active.max(1) as f64).sqrt()
}

/// Number of grid points per active axis and in total.
pub fn grid_shape(region: &Region, tau: f64) -> (Vec<usize>, f64) {
    let active = region.active_axes();
    let h = grid_spacing(tau, active.len());
    let counts: Vec<usize> = active
        .iter()
        .map(|&a| ((region.upper[a] - region.lower[a]) / h).ceil() as usize + 1)
        .collect();
    let total = counts.iter().map(|&c| c as f64).product::<f64>();
    (counts, total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    pub cap: usize,
    pub bound_samples: usize,
    pub seed: u64,
    pub max_offenders: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_GRID_CAP,
            bound_samples: 2000,
            seed: 0,
            max_offenders: 20,
        }
    }
}

/// Evaluates both robust inequalities on a grid of covering radius `tau`.
pub fn grid_verify(
    ck: &CertificateCheckpoint,
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    region: &Region,
    tau: f64,
    opts: &GridOptions,
) -> Result<VerificationReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid("tau must be positive"));
    }
    region.check(sys)?;
    let (counts, total) = grid_shape(region, tau);
    if total > opts.cap as f64 {
        return Err(Error::GridTooLarge {
            points: total,
            cap: opts.cap,
        });
    }
    let total = total as usize;
    let active = region.active_axes();
    let bounds = lipschitz_constants(ck, sys, sel, region, opts.bound_samples, opts.seed)?;
    let (lambda, alpha, mu) = (ck.hyper.lambda, ck.gains.alpha(), ck.gains.mu());
    let l10 = bounds.l_eq10(lambda, mu);
    let l11 = bounds.l_eq11(lambda, alpha);

    let point = |idx: usize| -> Vec<f64> {
        let mut p = region.lower.clone();
        let mut rest = idx;
        for (&ax, &cnt) in active.iter().zip(&counts) {
            let k = rest % cnt;
            rest /= cnt;
            let t = if cnt > 1 {
                k as f64 / (cnt - 1) as f64
            } else {
                0.0
            };
            p[ax] = region.lower[ax] + t * (region.upper[ax] - region.lower[ax]);
        }
        p
    };
    let values: Vec<(f64, f64)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let p = point(i);
            let s = SamplePoint::unflatten(sys, &p)?;
            let mats = certificate_matrices(sys, ck, sel, &s)?;
            Ok((lambda_max(&mats.c1)?, lambda_max(&mats.c2.neg())?))
        })
        .collect::<Result<_>>()?;
    let grid_max_c1 = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let grid_max_c2 = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let thr1 = -l10 * tau;
    let thr2 = -l11 * tau;

    let mut offenders: Vec<Offender> = Vec::new();
    for (which, thr) in [(1u8, thr1), (2u8, thr2)] {
        let mut bad: Vec<(usize, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, v)| (i, if which == 1 { v.0 } else { v.1 }))
            .filter(|(_, v)| *v >= thr)
            .collect();
        bad.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        offenders.extend(
            bad.into_iter()
                .take(opts.max_offenders)
                .map(|(i, value)| Offender {
                    inequality: which,
                    value,
                    point: point(i),
                }),
        );
    }
    Ok(VerificationReport {
        region: region.clone(),
        tau,
        points: total,
        lambda,
        alpha,
        mu,
        rigorous: bounds.all_rigorous(),
        bounds,
        l_eq10: l10,
        l_eq11: l11,
        grid_max_c1,
        grid_max_c2,
        pass_c1: grid_max_c1 < thr1,
        pass_c2: grid_max_c2 < thr2,
        offenders,
        rates: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::tests::toy_checkpoint;
    use crate::systems::scalar_toy;

    fn toy_region() -> Region {
        Region::new("toy", vec![-1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn prop_constants_from_unit_bounds() {
        let b = BoundSet::uniform(1.0);
        assert_eq!(b.l_eq10(0.5, 1.0), 13.5);
        let mut b = BoundSet::uniform(1.0);
        b.s_d = Bound::exact(0.0);
        b.l_m = Bound::exact(0.37);
        assert_eq!(b.l_eq11(0.5, 4.0), 0.5 * 0.37);
    }

    #[test]
    fn metric_floor_bounds_inverse() {
        let sys = crate::systems::make_system("pvtol").unwrap();
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(1);
        let ck = CertificateCheckpoint::init(
            "pvtol",
            6,
            2,
            &sys.network_inputs(),
            crate::certnets::Hyperparams {
                hidden: 8,
                c: 3,
                ..Default::default()
            },
            sys.training_selector(0.1).unwrap(),
            crate::certnets::GainParams::from_alpha_mu(2.0, 1.0).unwrap(),
            &mut rng,
        )
        .unwrap();
        let region = Region::tracking_slice(&sys, &[0.0; 6], &[2.0, 2.0], &[0.0]).unwrap();
        let b = lipschitz_constants(&ck, &sys, &ck.selector, &region, 50, 2).unwrap();
        assert!((b.s_m.value - 10.0).abs() < 1e-12);
        assert_eq!(b.s_m.provenance, Provenance::Rigorous);
        assert!(!b.all_rigorous());
        let rates = violation_rate(&ck, &sys, &ck.selector, 200, 3).unwrap();
        assert!(rates.c1 > 0.0);
        assert!(violation_rate(&ck, &sys, &ck.selector, 0, 3).is_err());
    }

    #[test]
    fn scalar_toy_grid_passes() {
        let sys = scalar_toy().unwrap();
        let ck = toy_checkpoint(0.5, 4.0, 1.0);
        let r = grid_verify(
            &ck,
            &sys,
            &ck.selector,
            &toy_region(),
            0.01,
            &GridOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.points, 101);
        assert!((r.grid_max_c1 + 0.219).abs() < 1e-3);
        assert!(r.offenders.is_empty());
        let rates = violation_rate(&ck, &sys, &ck.selector, 1000, 1).unwrap();
        assert_eq!(
            (rates.c1, rates.c2, rates.c3, rates.c4),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn lowered_alpha_fails_output_gain() {
        let sys = scalar_toy().unwrap();
        let ck = toy_checkpoint(0.5, 1.5, 1.0);
        let r = grid_verify(
            &ck,
            &sys,
            &ck.selector,
            &toy_region(),
            0.01,
            &GridOptions::default(),
        )
        .unwrap();
        assert!(r.pass_c1 && !r.pass_c2);
        assert!(r.offenders.iter().any(|o| o.inequality == 2));
        assert!((r.grid_max_c2 - (1.0 / 1.5 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn denser_grid_keeps_passing() {
        let sys = scalar_toy().unwrap();
        let ck = toy_checkpoint(0.5, 4.0, 1.0);
        for tau in [0.1, 0.05, 0.025] {
            let r = grid_verify(
                &ck,
                &sys,
                &ck.selector,
                &toy_region(),
                tau,
                &GridOptions::default(),
            )
            .unwrap();
            assert!(r.passed());
        }
    }

    #[test]
    fn oversize_grid_is_refused() {
        let sys = scalar_toy().unwrap();
        let ck = toy_checkpoint(0.5, 4.0, 1.0);
        let opts = GridOptions {
            cap: 10,
            ..Default::default()
        };
        assert!(matches!(
            grid_verify(&ck, &sys, &ck.selector, &toy_region(), 0.01, &opts),
            Err(Error::GridTooLarge { .. })
        ));
    }

    #[test]
    fn report_round_trips() {
        let sys = scalar_toy().unwrap();
        let ck = toy_checkpoint(0.5, 1.5, 1.0);
        let mut r = grid_verify(
            &ck,
            &sys,
            &ck.selector,
            &toy_region(),
            0.05,
            &GridOptions::default(),
        )
        .unwrap();
        r.rates = Some(ViolationRates {
            c1: 0.25,
            c2: 0.5,
            c3: 0.0,
            c4: 0.0,
            samples: 8,
        });
        let back = VerificationReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back.to_text(), r.to_text());
        assert_eq!(back.offenders, r.offenders);
    }

    #[test]
    fn region_round_trips() {
        let r = toy_region();
        assert_eq!(Region::from_text(&r.to_text()).unwrap(), r);
    }
}
