//! Benchmark dynamics behind one control-affine interface.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{input_jacobian, Dual, Real};
use crate::error::{invalid, Error, Result};
use crate::numerics::null_space_basis;

/// Axis-aligned box `lower ≤ x ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("box bounds must be nonempty and of equal length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !l.is_finite() || !u.is_finite() || l > u)
        {
            return Err(invalid("box bounds must be finite with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    /// Box `center ± radius` in every coordinate.
    pub fn symmetric(center: &[f64], radius: &[f64]) -> Result<Self> {
        Self::new(
            center.iter().zip(radius).map(|(c, r)| c - r).collect(),
            center.iter().zip(radius).map(|(c, r)| c + r).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..=u) })
            .collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }
}

/// Output map `z = C x + D u` selecting the signal whose tube is certified.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSelector {
    pub label: String,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl OutputSelector {
    pub fn new(label: impl Into<String>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != d.nrows() || c.nrows() == 0 {
            return Err(invalid(
                "selector C and D must have the same nonzero row count",
            ));
        }
        if c.iter().chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("selector has non-finite entries"));
        }
        if c.iter().chain(d.iter()).all(|v| *v == 0.0) {
            return Err(invalid("selector has no nonzero row"));
        }
        Ok(Self {
            label: label.into(),
            c,
            d,
        })
    }

    pub fn rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn has_feedthrough(&self) -> bool {
        self.d.iter().any(|v| *v != 0.0)
    }

    pub fn output(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let z = &self.c * DVector::from_column_slice(x) + &self.d * DVector::from_column_slice(u);
        z.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectorKind {
    /// `z = [(Qx)ᵀ, (Ru)ᵀ]ᵀ`.
    WeightedAll {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    },
    Positions,
    Inputs,
    Custom {
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadDriftConvention {
    #[default]
    AsPrinted,
    Conventional,
}

impl std::str::FromStr for QuadDriftConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(Self::AsPrinted),
            "conventional" => Ok(Self::Conventional),
            other => Err(invalid(format!("unknown quad_drift_convention {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuadDriftConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AsPrinted => "as_printed",
            Self::Conventional => "conventional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SystemOptions {
    pub quad_drift: QuadDriftConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvtolParams {
    pub m: f64,
    pub j: f64,
    pub l: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TlpraParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub e: f64,
}

impl TlpraParams {
    pub fn from_physical(m1: f64, m2: f64, a1: f64, a2: f64, g: f64) -> Self {
        Self {
            alpha: (m1 + m2) * a1 * a1,
            beta: m2 * a2 * a2,
            eta: m2 * a1 * a2,
            e: g / a1,
        }
    }

    pub fn mass_matrix(&self, theta2: f64) -> [[f64; 2]; 2] {
        let c = theta2.cos();
        [
            [
                self.alpha + self.beta + 2.0 * self.eta * c,
                self.beta + self.eta * c,
            ],
            [self.beta + self.eta * c, self.beta],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Pvtol(PvtolParams),
    Quadrotor {
        g: f64,
        conv: QuadDriftConvention,
    },
    NeuralLander {
        m: f64,
        g: f64,
    },
    Tlpra(TlpraParams),
    Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        bw: DMatrix<f64>,
    },
}

/// Drift, input and disturbance matrices evaluated at one state.
#[derive(Debug, Clone)]
pub struct Maps<T> {
    pub f: Vec<T>,
    /// `n × m`, row-major.
    pub b: Vec<T>,
    /// `n × l`, row-major.
    pub bw: Vec<T>,
}

/// Values and state Jacobians of `f`, the columns of `B` and the columns of `B_w`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub f: DVector<f64>,
    pub b: DMatrix<f64>,
    pub bw: DMatrix<f64>,
    pub jac_f: DMatrix<f64>,
    pub jac_b: Vec<DMatrix<f64>>,
    pub jac_bw: Vec<DMatrix<f64>>,
}

impl Linearization {
    /// `∂f/∂x + Σ ∂b_j/∂x u_j + Σ ∂b_{w,i}/∂x w_i`.
    pub fn matrix_a(&self, u: &[f64], w: &[f64]) -> DMatrix<f64> {
        let mut a = self.jac_f.clone();
        for (jb, uj) in self.jac_b.iter().zip(u) {
            a += jb * *uj;
        }
        for (jw, wi) in self.jac_bw.iter().zip(w) {
            a += jw * *wi;
        }
        a
    }
}

/// `ẋ = f(x) + B(x)u + B_w(x)w` together with its operating sets.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    name: String,
    model: Model,
    n: usize,
    m: usize,
    l: usize,
    pub x_set: BoxSet,
    pub u_set: BoxSet,
    pub x0_set: BoxSet,
    pub xe0_set: BoxSet,
    pub sigma: f64,
    positions: Vec<usize>,
    constant_b: bool,
    constant_bw: bool,
    b_perp_cache: Option<DMatrix<f64>>,
}

pub const PVTOL_GRAVITY: f64 = 9.81;

/// Builds a benchmark system with default options.
pub fn make_system(name: &str) -> Result<ControlAffineSystem> {
    make_system_with(name, SystemOptions::default())
}

pub fn make_system_with(name: &str, opts: SystemOptions) -> Result<ControlAffineSystem> {
    match name {
        "pvtol" => pvtol(),
        "quadrotor" => quadrotor(opts.quad_drift),
        "neural_lander" => neural_lander(),
        "tlpra" => tlpra(),
        other => Err(invalid(format!(
            "unknown system {other:?}; expected pvtol, quadrotor, neural_lander or tlpra"
        ))),
    }
}

/// `ẋ = −x + u + w` on `X = U = [−1, 1]`.
pub fn scalar_toy() -> Result<ControlAffineSystem> {
    ControlAffineSystem::linear(
        "scalar_toy",
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        BoxSet::new(vec![-1.0], vec![1.0])?,
        BoxSet::new(vec![-1.0], vec![1.0])?,
    )
}

pub const SYSTEM_NAMES: [&str; 4] = ["pvtol", "quadrotor", "neural_lander", "tlpra"];

fn pvtol() -> Result<ControlAffineSystem> {
    let p = PvtolParams {
        m: 0.486,
        j: 0.00383,
        l: 0.25,
        g: PVTOL_GRAVITY,
    };
    let hover = p.m * p.g / 2.0;
    let third = PI / 3.0;
    ControlAffineSystem::build(
        "pvtol",
        Model::Pvtol(p),
        (6, 2, 1),
        BoxSet::new(
            vec![-35.0, -2.0, -third, -2.0, -1.0, -third],
            vec![0.0, 2.0, third, 2.0, 1.0, third],
        )?,
        BoxSet::new(vec![hover - 1.0; 2], vec![hover + 1.0; 2])?,
        BoxSet::new(
            vec![0.0, 0.0, -0.1, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.1, 1.0, 0.0, 0.0],
        )?,
        BoxSet::new(vec![-0.5; 6], vec![0.5; 6])?,
        vec![0, 1],
        (true, false),
    )
}

fn quadrotor(conv: QuadDriftConvention) -> Result<ControlAffineSystem> {
    let g = 9.81;
    let third = PI / 3.0;
    ControlAffineSystem::build(
        "quadrotor",
        Model::Quadrotor { g, conv },
        (10, 4, 3),
        BoxSet::new(
            vec![
                -30.0,
                -30.0,
                -30.0,
                -1.5,
                -1.5,
                -1.5,
                0.5 * g,
                -third,
                -third,
                -third,
            ],
            vec![
                30.0,
                30.0,
                30.0,
                1.5,
                1.5,
                1.5,
                2.0 * g,
                third,
                third,
                third,
            ],
        )?,
        BoxSet::new(vec![-1.0; 4], vec![1.0; 4])?,
        BoxSet::new(
            vec![-5.0, -5.0, -5.0, -1.0, -1.0, -1.0, g, 0.0, 0.0, 0.0],
            vec![5.0, 5.0, 5.0, 1.0, 1.0, 1.0, g, 0.0, 0.0, 0.0],
        )?,
        BoxSet::new(vec![-0.5; 10], vec![0.5; 10])?,
        vec![0, 1, 2],
        (true, true),
    )
}

fn neural_lander() -> Result<ControlAffineSystem> {
    ControlAffineSystem::build(
        "neural_lander",
        Model::NeuralLander { m: 1.47, g: 9.81 },
        (6, 3, 3),
        BoxSet::new(
            vec![-5.0, -5.0, 0.0, -1.0, -1.0, -1.0],
            vec![5.0, 5.0, 2.0, 1.0, 1.0, 1.0],
        )?,
        BoxSet::new(vec![-1.0, -1.0, -3.0], vec![1.0, 1.0, 9.0])?,
        BoxSet::new(
            vec![-3.0, -3.0, 0.5, 1.0, 0.0, 0.0],
            vec![3.0, 3.0, 1.0, 1.0, 0.0, 0.0],
        )?,
        BoxSet::new(
            vec![-1.0, -1.0, -0.4, -1.0, -1.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        )?,
        vec![0, 1, 2],
        (true, true),
    )
}

fn tlpra() -> Result<ControlAffineSystem> {
    let half = PI / 2.0;
    let third = PI / 3.0;
    ControlAffineSystem::build(
        "tlpra",
        Model::Tlpra(TlpraParams::from_physical(0.8, 2.3, 1.0, 1.0, 9.8)),
        (4, 2, 2),
        BoxSet::new(
            vec![-half, -half, -third, -third],
            vec![half, half, third, third],
        )?,
        BoxSet::new(vec![0.0; 2], vec![1.0; 2])?,
        BoxSet::new(vec![half, 0.0, 0.0, 0.0], vec![half, 0.0, 0.0, 0.0])?,
        BoxSet::new(vec![-0.3, -0.3, 0.0, 0.0], vec![0.3, 0.3, 0.0, 0.0])?,
        vec![0, 1],
        (false, true),
    )
}

/// Analytic surrogate for the learned ground-effect forces `Fa(z, v)`.
pub fn lander_surrogate_force<T: Real>(z: T, vx: T, vy: T, vz: T) -> [T; 3] {
    let decay = (z * -0.5).exp();
    [
        vx.tanh() * decay * 0.2,
        vy.tanh() * decay * 0.2,
        (z * -0.8).exp() * 2.0 - vz * 0.3,
    ]
}

impl ControlAffineSystem {
    #[allow(clippy::too_many_arguments)]
    fn build(
        name: &str,
        model: Model,
        (n, m, l): (usize, usize, usize),
        x_set: BoxSet,
        u_set: BoxSet,
        x0_set: BoxSet,
        xe0_set: BoxSet,
        positions: Vec<usize>,
        (constant_b, constant_bw): (bool, bool),
    ) -> Result<Self> {
        if x_set.dim() != n || x0_set.dim() != n || xe0_set.dim() != n || u_set.dim() != m {
            return Err(invalid(format!("set dimensions inconsistent for {name}")));
        }
        let mut sys = Self {
            name: name.to_string(),
            model,
            n,
            m,
            l,
            x_set,
            u_set,
            x0_set,
            xe0_set,
            sigma: 1.0,
            positions,
            constant_b,
            constant_bw,
            b_perp_cache: None,
        };
        if constant_b {
            let b = sys.b_matrix(&sys.x_set.center());
            sys.b_perp_cache = match null_space_basis(&b) {
                Ok(bp) => Some(bp),
                Err(Error::EmptyAnnihilator) => None,
                Err(e) => return Err(e),
            };
        }
        Ok(sys)
    }

    /// Linear system `ẋ = A x + B u + B_w w` on the given sets.
    pub fn linear(
        name: &str,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        bw: DMatrix<f64>,
        x_set: BoxSet,
        u_set: BoxSet,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || bw.nrows() != n {
            return Err(invalid("linear system matrices have inconsistent shapes"));
        }
        let (m, l) = (b.ncols(), bw.ncols());
        let x0 = x_set.clone();
        let xe0 = BoxSet::new(vec![0.0; n], vec![0.0; n])?;
        Self::build(
            name,
            Model::Linear { a, b, bw },
            (n, m, l),
            x_set,
            u_set,
            x0,
            xe0,
            (0..n).collect(),
            (true, true),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn position_indices(&self) -> &[usize] {
        &self.positions
    }

    /// Coordinates on which neither the drift nor the input matrices depend.
    pub fn translation_invariant(&self) -> Vec<usize> {
        match &self.model {
            Model::Pvtol(_) | Model::NeuralLander { .. } => vec![0, 1],
            Model::Quadrotor { .. } => vec![0, 1, 2],
            Model::Tlpra(_) | Model::Linear { .. } => Vec::new(),
        }
    }

    /// State coordinates fed to the learned networks.
    pub fn network_inputs(&self) -> Vec<usize> {
        let inv = self.translation_invariant();
        (0..self.n()).filter(|i| !inv.contains(i)).collect()
    }

    pub fn has_constant_b(&self) -> bool {
        self.constant_b
    }

    pub fn has_constant_bw(&self) -> bool {
        self.constant_bw
    }

    pub fn pvtol_params(&self) -> Option<&PvtolParams> {
        match &self.model {
            Model::Pvtol(p) => Some(p),
            _ => None,
        }
    }

    pub fn tlpra_params(&self) -> Option<&TlpraParams> {
        match &self.model {
            Model::Tlpra(p) => Some(p),
            _ => None,
        }
    }

    pub fn quad_convention(&self) -> Option<QuadDriftConvention> {
        match &self.model {
            Model::Quadrotor { conv, .. } => Some(*conv),
            _ => None,
        }
    }

    /// Evaluates `f`, `B`, `B_w` in any [`Real`] arithmetic.
    pub fn maps<T: Real>(&self, x: &[T]) -> Maps<T> {
        let (n, m, l) = (self.n, self.m, self.l);
        let z = T::zero();
        let mut f = vec![z; n];
        let mut b = vec![z; n * m];
        let mut bw = vec![z; n * l];
        match &self.model {
            Model::Pvtol(p) => {
                let (phi, vx, vz, dphi) = (x[2], x[3], x[4], x[5]);
                let (s, c) = (phi.sin(), phi.cos());
                f[0] = vx * c - vz * s;
                f[1] = vx * s + vz * c;
                f[2] = dphi;
                f[3] = vz * dphi - s * p.g;
                f[4] = -(vx * dphi) - c * p.g;
                b[4 * m] = T::cst(1.0 / p.m);
                b[4 * m + 1] = T::cst(1.0 / p.m);
                b[5 * m] = T::cst(p.l / p.j);
                b[5 * m + 1] = T::cst(-p.l / p.j);
                bw[3] = c;
                bw[4] = -s;
            }
            Model::Quadrotor { g, conv } => {
                let (thrust, phi, theta) = (x[6], x[7], x[8]);
                f[0] = x[3];
                f[1] = x[4];
                f[2] = x[5];
                f[3] = -(thrust * theta.sin());
                f[4] = thrust * theta.sin() * phi.cos();
                f[5] = match conv {
                    QuadDriftConvention::AsPrinted => -(thrust * theta.sin() * phi.cos()) + *g,
                    QuadDriftConvention::Conventional => -(thrust * theta.cos() * phi.cos()) + *g,
                };
                for j in 0..4 {
                    b[(6 + j) * m + j] = T::cst(1.0);
                }
                for i in 0..3 {
                    bw[(3 + i) * l + i] = T::cst(1.0);
                }
            }
            Model::NeuralLander { m: mass, g } => {
                let fa = lander_surrogate_force(x[2], x[3], x[4], x[5]);
                f[0] = x[3];
                f[1] = x[4];
                f[2] = x[5];
                f[3] = fa[0] / *mass;
                f[4] = fa[1] / *mass;
                f[5] = fa[2] / *mass - *g;
                for j in 0..3 {
                    b[(3 + j) * m + j] = T::cst(1.0);
                    bw[(3 + j) * l + j] = T::cst(1.0);
                }
            }
            Model::Tlpra(p) => {
                let (t1, t2, d1, d2) = (x[0], x[1], x[2], x[3]);
                let c2 = t2.cos();
                let s2 = t2.sin();
                let m11 = c2 * (2.0 * p.eta) + (p.alpha + p.beta);
                let m12 = c2 * p.eta + p.beta;
                let m22 = T::cst(p.beta);
                let det = m11 * m22 - m12 * m12;
                let inv = det.recip();
                let (i11, i12, i22) = (m22 * inv, -(m12 * inv), m11 * inv);
                let gq1 = (d1 * d2 * 2.0 + d2 * d2) * s2 * p.eta
                    - t1.cos() * (p.alpha * p.e)
                    - (t1 + t2).cos() * (p.eta * p.e);
                let gq2 = -(d1 * d1 * s2 * p.eta) - (t1 + t2).cos() * (p.eta * p.e);
                f[0] = d1;
                f[1] = d2;
                f[2] = i11 * gq1 + i12 * gq2;
                f[3] = i12 * gq1 + i22 * gq2;
                b[2 * m] = i11;
                b[2 * m + 1] = i12;
                b[3 * m] = i12;
                b[3 * m + 1] = i22;
                bw[2 * l] = T::cst(1.0);
                bw[3 * l + 1] = T::cst(1.0);
            }
            Model::Linear { a, b: bm, bw: bwm } => {
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += x[j] * a[(i, j)];
                    }
                    f[i] = acc;
                    for j in 0..m {
                        b[i * m + j] = T::cst(bm[(i, j)]);
                    }
                    for j in 0..l {
                        bw[i * l + j] = T::cst(bwm[(i, j)]);
                    }
                }
            }
        }
        Maps { f, b, bw }
    }

    fn check_dims(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<()> {
        if x.len() != self.n || u.len() != self.m || w.len() != self.l {
            return Err(invalid(format!(
                "{}: expected (x, u, w) dims ({}, {}, {}), got ({}, {}, {})",
                self.name,
                self.n,
                self.m,
                self.l,
                x.len(),
                u.len(),
                w.len()
            )));
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.maps(x).f
    }

    pub fn b_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m, &self.maps(x).b)
    }

    pub fn bw_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.l, &self.maps(x).bw)
    }

    /// `f(x) + B(x)u + B_w(x)w`.
    pub fn dynamics(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u, w)?;
        Ok(self.dynamics_unchecked(x, u, w))
    }

    pub(crate) fn dynamics_unchecked(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let Maps { mut f, b, bw } = self.maps(x);
        for i in 0..self.n {
            for j in 0..self.m {
                f[i] += b[i * self.m + j] * u[j];
            }
            for j in 0..self.l {
                f[i] += bw[i * self.l + j] * w[j];
            }
        }
        f
    }

    /// Values and all state Jacobians from one forward-mode sweep.
    pub fn linearize(&self, x: &[f64]) -> Result<Linearization> {
        let (n, m, l) = (self.n, self.m, self.l);
        if x.len() != n {
            return Err(invalid(format!(
                "{}: state has dim {} not {n}",
                self.name,
                x.len()
            )));
        }
        let all = |xs: &[Dual]| {
            let Maps { mut f, b, bw } = self.maps(xs);
            f.extend(b);
            f.extend(bw);
            f
        };
        let jac = input_jacobian(all, x)?;
        let Maps { f, b, bw } = self.maps(x);
        let jac_f = jac.rows(0, n).into_owned();
        let col_jac = |base: usize, cols: usize, j: usize| {
            DMatrix::from_fn(n, n, |i, k| jac[(base + i * cols + j, k)])
        };
        let jac_b = (0..m).map(|j| col_jac(n, m, j)).collect();
        let jac_bw = (0..l).map(|j| col_jac(n + n * m, l, j)).collect();
        Ok(Linearization {
            f: DVector::from_vec(f),
            b: DMatrix::from_row_slice(n, m, &b),
            bw: DMatrix::from_row_slice(n, l, &bw),
            jac_f,
            jac_b,
            jac_bw,
        })
    }

    pub fn jac_f(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.linearize(x)?.jac_f)
    }

    pub fn jac_b_col(&self, j: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        if j >= self.m {
            return Err(invalid(format!("input column {j} out of range")));
        }
        Ok(self.linearize(x)?.jac_b.swap_remove(j))
    }

    pub fn jac_bw_col(&self, i: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        if i >= self.l {
            return Err(invalid(format!("disturbance column {i} out of range")));
        }
        Ok(self.linearize(x)?.jac_bw.swap_remove(i))
    }

    /// `A(x, u, w) = ∂f/∂x + Σ ∂b_j/∂x u_j + Σ ∂b_{w,i}/∂x w_i`.
    pub fn matrix_a(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dims(x, u, w)?;
        Ok(self.linearize(x)?.matrix_a(u, w))
    }

    /// Orthonormal annihilator of `B(x)`; cached when `B` is constant.
    pub fn b_perp(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if self.constant_b {
            return self.b_perp_cache.clone().ok_or(Error::EmptyAnnihilator);
        }
        null_space_basis(&self.b_matrix(x))
    }

    /// Input closest (least squares) to cancelling the drift, clamped into `U`.
    pub fn trim_input(&self, x: &[f64]) -> Vec<f64> {
        let Maps { f, b, .. } = self.maps(x);
        let bm = DMatrix::from_row_slice(self.n, self.m, &b);
        let rhs = -DVector::from_vec(f);
        let mut u: Vec<f64> = match bm.clone().svd(true, true).solve(&rhs, 1e-12) {
            Ok(sol) => sol.iter().copied().collect(),
            Err(_) => self.u_set.center(),
        };
        self.u_set.clamp(&mut u);
        u
    }

    pub fn output_selector(&self, kind: &SelectorKind) -> Result<OutputSelector> {
        let (n, m) = (self.n, self.m);
        match kind {
            SelectorKind::Positions => {
                let p = self.positions.len();
                let mut c = DMatrix::zeros(p, n);
                for (r, &i) in self.positions.iter().enumerate() {
                    c[(r, i)] = 1.0;
                }
                OutputSelector::new("positions", c, DMatrix::zeros(p, m))
            }
            SelectorKind::Inputs => {
                OutputSelector::new("inputs", DMatrix::zeros(m, n), DMatrix::identity(m, m))
            }
            SelectorKind::WeightedAll { q, r } => {
                if q.ncols() != n || r.ncols() != m {
                    return Err(invalid(format!(
                        "weighted selector needs Q with {n} columns and R with {m} columns"
                    )));
                }
                let (pq, pr) = (q.nrows(), r.nrows());
                let mut c = DMatrix::zeros(pq + pr, n);
                let mut d = DMatrix::zeros(pq + pr, m);
                c.rows_mut(0, pq).copy_from(q);
                d.rows_mut(pq, pr).copy_from(r);
                OutputSelector::new("weighted_all", c, d)
            }
            SelectorKind::Custom { c, d } => {
                if c.ncols() != n || d.ncols() != m {
                    return Err(invalid(format!(
                        "custom selector needs C with {n} columns and D with {m} columns"
                    )));
                }
                OutputSelector::new("custom", c.clone(), d.clone())
            }
        }
    }

    /// Default training output: unit weight on positions plus `r·u`.
    pub fn training_selector(&self, r: f64) -> Result<OutputSelector> {
        let p = self.positions.len();
        let mut q = DMatrix::zeros(p, self.n);
        for (row, &i) in self.positions.iter().enumerate() {
            q[(row, i)] = 1.0;
        }
        let mut sel = self.output_selector(&SelectorKind::WeightedAll {
            q,
            r: DMatrix::identity(self.m, self.m) * r,
        })?;
        sel.label = "training".into();
        Ok(sel)
    }
}
