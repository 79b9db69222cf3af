//! Metric and controller networks, gain variables, and checkpoints.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{softplus, softplus_inv, Graph, ParamVector, Real, Shape, Var};
use crate::error::{invalid, Result};
use crate::numerics::SymMatrix;
use crate::systems::{
    make_system_with, ControlAffineSystem, OutputSelector, QuadDriftConvention, SystemOptions,
};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_INNER_WIDTH: usize = 128;

/// Two-layer perceptron `W₂ tanh(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    din: usize,
    hidden: usize,
    dout: usize,
    params: ParamVector,
}

/// Graph leaves for one [`Mlp2`], in layout order.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Mlp2 {
    pub fn zeros(din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            din,
            hidden,
            dout,
            params: ParamVector::zeros(&[
                ("w1", hidden, din),
                ("b1", 1, hidden),
                ("w2", dout, hidden),
                ("b2", 1, dout),
            ]),
        }
    }

    /// Uniform initialization in `±1/√fan_in` per layer.
    pub fn random<R: Rng + ?Sized>(din: usize, hidden: usize, dout: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(din, hidden, dout);
        for (name, fan_in) in [("w1", din), ("b1", din), ("w2", hidden), ("b2", hidden)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in net.params.tensor_mut(name).expect("layout") {
                *v = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let shape = |name: &str| params.slot(name).map(|s| (s.rows, s.cols));
        let (Some((hidden, din)), Some((1, h1)), Some((dout, h2)), Some((1, d2))) =
            (shape("w1"), shape("b1"), shape("w2"), shape("b2"))
        else {
            return Err(invalid("network tensors must be w1, b1, w2, b2"));
        };
        if params.slots().len() != 4 || h1 != hidden || h2 != hidden || d2 != dout {
            return Err(invalid("inconsistent network tensor shapes"));
        }
        if !params.is_finite() {
            return Err(invalid("network parameters are not finite"));
        }
        let mut net = Self::zeros(din, hidden, dout);
        for (name, _, _, vals) in params.unpack() {
            net.params
                .tensor_mut(&name)
                .expect("layout")
                .copy_from_slice(&vals);
        }
        Ok(net)
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn din(&self) -> usize {
        self.din
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dout(&self) -> usize {
        self.dout
    }

    pub fn w1(&self) -> &[f64] {
        self.params.tensor("w1").expect("layout")
    }

    pub fn b1(&self) -> &[f64] {
        self.params.tensor("b1").expect("layout")
    }

    pub fn w2(&self) -> &[f64] {
        self.params.tensor("w2").expect("layout")
    }

    pub fn b2(&self) -> &[f64] {
        self.params.tensor("b2").expect("layout")
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        let w1 = self.w1();
        self.b1()
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let row = &w1[k * self.din..(k + 1) * self.din];
                (b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn output_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let w2 = self.w2();
        self.b2()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let row = &w2[i * self.hidden..(i + 1) * self.hidden];
                b + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden_act(x);
        self.output_from_hidden(&h)
    }

    /// Forward pass in generic arithmetic.
    pub fn forward_generic<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let h: Vec<T> = (0..self.hidden)
            .map(|k| {
                let mut a = T::cst(b1[k]);
                for j in 0..self.din {
                    a += x[j] * w1[k * self.din + j];
                }
                a.tanh()
            })
            .collect();
        (0..self.dout)
            .map(|i| {
                let mut o = T::cst(b2[i]);
                for k in 0..self.hidden {
                    o += h[k] * w2[i * self.hidden + k];
                }
                o
            })
            .collect()
    }

    /// Output and its Jacobian with respect to the first `ntan` inputs (`dout × ntan`, row-major).
    pub fn forward_with_jacobian(&self, x: &[f64], ntan: usize) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden_act(x);
        let out = self.output_from_hidden(&h);
        let w1 = self.w1();
        let w2 = self.w2();
        let mut inner = vec![0.0; self.hidden * ntan];
        for k in 0..self.hidden {
            let d = 1.0 - h[k] * h[k];
            for j in 0..ntan {
                inner[k * ntan + j] = d * w1[k * self.din + j];
            }
        }
        let mut jac = vec![0.0; self.dout * ntan];
        for i in 0..self.dout {
            let row = &w2[i * self.hidden..(i + 1) * self.hidden];
            let jr = &mut jac[i * ntan..(i + 1) * ntan];
            for (k, w) in row.iter().enumerate() {
                let ik = &inner[k * ntan..(k + 1) * ntan];
                for (o, v) in jr.iter_mut().zip(ik) {
                    *o += w * v;
                }
            }
        }
        (out, jac)
    }

    pub fn graph_vars(&self, g: &mut Graph) -> MlpVars {
        let mut leaf = |name: &str, rows: usize, cols: usize| {
            g.param(
                Shape::new(1, rows, cols),
                self.params.tensor(name).expect("layout").to_vec(),
            )
            .expect("layout sizes")
        };
        MlpVars {
            w1: leaf("w1", self.hidden, self.din),
            b1: leaf("b1", 1, self.hidden),
            w2: leaf("w2", self.dout, self.hidden),
            b2: leaf("b2", 1, self.dout),
        }
    }

    /// Applies the network to dual-row input `[B, 1 + k, din]`.
    pub fn graph_apply(g: &mut Graph, vars: &MlpVars, input: Var) -> Result<Var> {
        let a = g.rows_matmul_t(input, vars.w1)?;
        let a = g.add_bias_row0(a, vars.b1)?;
        let h = g.tanh_jvp(a);
        let o = g.rows_matmul_t(h, vars.w2)?;
        g.add_bias_row0(o, vars.b2)
    }

    /// Upper bound on `sup_x ‖out(x)‖₂` using `|tanh| ≤ 1`.
    pub fn output_norm_bound(&self) -> f64 {
        let w2 = DMatrix::from_row_slice(self.dout, self.hidden, self.w2());
        let b2: f64 = self.b2().iter().map(|v| v * v).sum::<f64>().sqrt();
        crate::numerics::spectral_norm(&w2) * (self.hidden as f64).sqrt() + b2
    }

    /// Upper bound on the Lipschitz constant of the network in the 2-norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let w1 = DMatrix::from_row_slice(self.hidden, self.din, self.w1());
        let w2 = DMatrix::from_row_slice(self.dout, self.hidden, self.w2());
        crate::numerics::spectral_norm(&w1) * crate::numerics::spectral_norm(&w2)
    }
}

/// Dual metric `W(x) = C(x) C(x)ᵀ + w̲ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricNet {
    pub net: Mlp2,
    pub w_floor: f64,
    n: usize,
    inputs: Vec<usize>,
}

/// Checks that `inputs` is a strictly increasing list of coordinates below `n`.
pub fn check_inputs(inputs: &[usize], n: usize) -> Result<()> {
    if inputs.windows(2).any(|w| w[0] >= w[1]) || inputs.iter().any(|&i| i >= n) {
        return Err(invalid(format!(
            "network inputs {inputs:?} are not increasing coordinates below {n}"
        )));
    }
    Ok(())
}

fn gather<T: Copy>(x: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| x[i]).collect()
}

/// Spreads a `rows × k` row-major Jacobian over masked columns into `rows × n`.
fn scatter_columns(jac: &[f64], rows: usize, idx: &[usize], n: usize) -> Vec<f64> {
    let k = idx.len();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for (j, &col) in idx.iter().enumerate() {
            out[r * n + col] = jac[r * k + j];
        }
    }
    out
}

impl MetricNet {
    pub fn new(net: Mlp2, n: usize, w_floor: f64) -> Result<Self> {
        Self::masked(net, n, (0..n).collect(), w_floor)
    }

    /// Metric network that reads only the state coordinates in `inputs`.
    pub fn masked(net: Mlp2, n: usize, inputs: Vec<usize>, w_floor: f64) -> Result<Self> {
        check_inputs(&inputs, n)?;
        let k = inputs.len();
        if net.din() != k || net.dout() != n * n {
            return Err(invalid(format!(
                "metric network must map R^{k} to R^{}",
                n * n
            )));
        }
        if !(w_floor > 0.0) {
            return Err(invalid("metric floor must be positive"));
        }
        Ok(Self {
            net,
            w_floor,
            n,
            inputs,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        n: usize,
        hidden: usize,
        w_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::random_masked(n, (0..n).collect(), hidden, w_floor, rng)
    }

    pub fn random_masked<R: Rng + ?Sized>(
        n: usize,
        inputs: Vec<usize>,
        hidden: usize,
        w_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::masked(
            Mlp2::random(inputs.len(), hidden, n * n, rng),
            n,
            inputs,
            w_floor,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// State coordinates fed to the network.
    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn c_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.net.forward(&gather(x, &self.inputs)))
    }

    fn w_from_c(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = c * c.transpose();
        for i in 0..self.n {
            w[(i, i)] += self.w_floor;
        }
        w
    }

    pub fn metric_w(&self, x: &[f64]) -> Result<SymMatrix> {
        if x.len() != self.n {
            return Err(invalid(format!(
                "metric expects dim {}, got {}",
                self.n,
                x.len()
            )));
        }
        SymMatrix::new(self.w_from_c(&self.c_matrix(x)))
    }

    /// `W(x)` and `∂W/∂x_k` for every state coordinate.
    pub fn w_and_partials(&self, x: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = self.n;
        let k = self.inputs.len();
        let (out, jac) = self.net.forward_with_jacobian(&gather(x, &self.inputs), k);
        let jac = scatter_columns(&jac, n * n, &self.inputs, n);
        let c = DMatrix::from_row_slice(n, n, &out);
        let w = self.w_from_c(&c);
        let partials = (0..n)
            .map(|k| {
                let dc = DMatrix::from_fn(n, n, |i, j| jac[(i * n + j) * n + k]);
                let t = &dc * c.transpose();
                &t + t.transpose()
            })
            .collect();
        (w, partials)
    }

    /// `W(x)` in generic arithmetic.
    pub fn metric_generic<T: Real>(&self, x: &[T]) -> Vec<T> {
        let n = self.n;
        let c = self.net.forward_generic(&gather(x, &self.inputs));
        let mut w = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = T::zero();
                for k in 0..n {
                    acc += c[i * n + k] * c[j * n + k];
                }
                w[i * n + j] = acc;
            }
            w[i * n + i] = w[i * n + i] + self.w_floor;
        }
        w
    }
}

/// `u = u* + φ₂(x, x*) tanh(φ₁(x, x*)(x − x*))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerNet {
    pub phi1: Mlp2,
    pub phi2: Mlp2,
    n: usize,
    m: usize,
    c: usize,
    inputs: Vec<usize>,
}

impl ControllerNet {
    pub fn new(phi1: Mlp2, phi2: Mlp2, n: usize, m: usize) -> Result<Self> {
        Self::masked(phi1, phi2, n, m, (0..n).collect())
    }

    /// Controller whose networks read `(x, x*)` restricted to `inputs`.
    pub fn masked(phi1: Mlp2, phi2: Mlp2, n: usize, m: usize, inputs: Vec<usize>) -> Result<Self> {
        check_inputs(&inputs, n)?;
        let k = inputs.len();
        if phi1.din() != 2 * k || phi2.din() != 2 * k {
            return Err(invalid("controller networks take (x, x*) as input"));
        }
        if phi1.dout() % n != 0 || phi1.dout() == 0 {
            return Err(invalid("phi1 output must be c x n"));
        }
        let c = phi1.dout() / n;
        if phi2.dout() != m * c {
            return Err(invalid("phi2 output must be m x c"));
        }
        Ok(Self {
            phi1,
            phi2,
            n,
            m,
            c,
            inputs,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        n: usize,
        m: usize,
        hidden: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::random_masked(n, m, (0..n).collect(), hidden, c, rng)
    }

    pub fn random_masked<R: Rng + ?Sized>(
        n: usize,
        m: usize,
        inputs: Vec<usize>,
        hidden: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = inputs.len();
        let phi1 = Mlp2::random(2 * k, hidden, c * n, rng);
        let phi2 = Mlp2::random(2 * k, hidden, m * c, rng);
        Self::masked(phi1, phi2, n, m, inputs)
    }

    /// State coordinates fed to both networks.
    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    fn net_input<T: Copy>(&self, x: &[T], xs: &[T]) -> Vec<T> {
        let mut v = gather(x, &self.inputs);
        v.extend(gather(xs, &self.inputs));
        v
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn inner_width(&self) -> usize {
        self.c
    }

    fn check(&self, x: &[f64], xs: &[f64], us: &[f64]) -> Result<()> {
        if x.len() != self.n || xs.len() != self.n || us.len() != self.m {
            return Err(invalid("controller input dimensions do not match"));
        }
        Ok(())
    }

    pub fn controller_u(&self, x: &[f64], xs: &[f64], us: &[f64]) -> Result<Vec<f64>> {
        self.check(x, xs, us)?;
        Ok(self.u_unchecked(x, xs, us))
    }

    pub(crate) fn u_unchecked(&self, x: &[f64], xs: &[f64], us: &[f64]) -> Vec<f64> {
        let (n, c) = (self.n, self.c);
        let input = self.net_input(x, xs);
        let p1 = self.phi1.forward(&input);
        let p2 = self.phi2.forward(&input);
        let s: Vec<f64> = (0..c)
            .map(|i| {
                (0..n)
                    .map(|j| p1[i * n + j] * (x[j] - xs[j]))
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        (0..self.m)
            .map(|i| us[i] + (0..c).map(|k| p2[i * c + k] * s[k]).sum::<f64>())
            .collect()
    }

    /// Control input and `K = ∂u/∂x` with `(x*, u*)` fixed.
    pub fn controller_u_and_k(
        &self,
        x: &[f64],
        xs: &[f64],
        us: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check(x, xs, us)?;
        let (n, m, c) = (self.n, self.m, self.c);
        let input = self.net_input(x, xs);
        let nk = self.inputs.len();
        let (p1, j1) = self.phi1.forward_with_jacobian(&input, nk);
        let j1 = scatter_columns(&j1, c * n, &self.inputs, n);
        let (p2, j2) = self.phi2.forward_with_jacobian(&input, nk);
        let j2 = scatter_columns(&j2, m * c, &self.inputs, n);
        let e: Vec<f64> = x.iter().zip(xs).map(|(a, b)| a - b).collect();
        let mut s = vec![0.0; c];
        let mut dv = vec![0.0; c * n];
        for i in 0..c {
            let mut v = 0.0;
            for j in 0..n {
                v += p1[i * n + j] * e[j];
            }
            s[i] = v.tanh();
            for k in 0..n {
                let mut acc = p1[i * n + k];
                for j in 0..n {
                    acc += j1[(i * n + j) * n + k] * e[j];
                }
                dv[i * n + k] = acc;
            }
        }
        let mut u = us.to_vec();
        let mut kmat = DMatrix::zeros(m, n);
        for r in 0..m {
            for i in 0..c {
                let phi = p2[r * c + i];
                u[r] += phi * s[i];
                let sp = 1.0 - s[i] * s[i];
                for k in 0..n {
                    kmat[(r, k)] += j2[(r * c + i) * n + k] * s[i] + phi * sp * dv[i * n + k];
                }
            }
        }
        Ok((u, kmat))
    }

    pub fn controller_k(&self, x: &[f64], xs: &[f64], us: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.controller_u_and_k(x, xs, us)?.1)
    }

    /// Control input in generic arithmetic over `x`.
    pub fn controller_generic<T: Real>(&self, x: &[T], xs: &[f64], us: &[f64]) -> Vec<T> {
        let (n, c) = (self.n, self.c);
        let xs_t: Vec<T> = xs.iter().map(|v| T::cst(*v)).collect();
        let input = self.net_input(x, &xs_t);
        let p1 = self.phi1.forward_generic(&input);
        let p2 = self.phi2.forward_generic(&input);
        let s: Vec<T> = (0..c)
            .map(|i| {
                let mut v = T::zero();
                for j in 0..n {
                    v += p1[i * n + j] * (x[j] - xs[j]);
                }
                v.tanh()
            })
            .collect();
        (0..self.m)
            .map(|i| {
                let mut o = T::cst(us[i]);
                for k in 0..c {
                    o += p2[i * c + k] * s[k];
                }
                o
            })
            .collect()
    }
}

/// Gain variables with `μ = softplus(raw_a)` and `α = μ + softplus(raw_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainParams {
    pub raw_a: f64,
    pub raw_b: f64,
}

impl GainParams {
    pub fn from_alpha_mu(alpha: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && alpha > mu && alpha.is_finite()) {
            return Err(invalid(format!(
                "need alpha > mu > 0, got alpha={alpha}, mu={mu}"
            )));
        }
        Ok(Self {
            raw_a: softplus_inv(mu),
            raw_b: softplus_inv(alpha - mu),
        })
    }

    pub fn mu(&self) -> f64 {
        softplus(self.raw_a)
    }

    pub fn alpha(&self) -> f64 {
        self.mu() + softplus(self.raw_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LieSign {
    /// `+∂_f W` in the C3 condition (default).
    #[default]
    Paper,
    /// `−∂_f W`, the usual dual-metric convention.
    Dual,
}

impl LieSign {
    pub fn factor(&self) -> f64 {
        match self {
            Self::Paper => 1.0,
            Self::Dual => -1.0,
        }
    }
}

impl std::str::FromStr for LieSign {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "+" => Ok(Self::Paper),
            "dual" | "-" => Ok(Self::Dual),
            other => Err(invalid(format!("unknown ccm_lie_sign {other:?}"))),
        }
    }
}

impl std::fmt::Display for LieSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Dual => "dual",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lambda: f64,
    pub w_floor: f64,
    pub hidden: usize,
    pub c: usize,
    pub seed: u64,
    pub sigma: f64,
    pub lie_sign: LieSign,
    pub quad_drift: QuadDriftConvention,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            w_floor: 0.1,
            hidden: DEFAULT_HIDDEN,
            c: DEFAULT_INNER_WIDTH,
            seed: 0,
            sigma: 1.0,
            lie_sign: LieSign::Paper,
            quad_drift: QuadDriftConvention::AsPrinted,
        }
    }
}

/// A refined gain for one output selector.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeEntry {
    pub selector: OutputSelector,
    pub alpha: f64,
    pub mu: f64,
    pub penalty: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub risk_c1: f64,
    pub risk_c2: f64,
    pub risk_c3: f64,
    pub risk_c4: f64,
}

/// Everything needed to reproduce a learned certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateCheckpoint {
    pub system: String,
    pub revision: u64,
    pub hyper: Hyperparams,
    pub selector: OutputSelector,
    pub metric: MetricNet,
    pub controller: ControllerNet,
    pub gains: GainParams,
    pub tubes: BTreeMap<String, TubeEntry>,
    pub history: Vec<HistoryRow>,
}

impl CertificateCheckpoint {
    /// Freshly initialized networks for a system of dimensions `(n, m)`.
    pub fn init<R: Rng + ?Sized>(
        system: &str,
        n: usize,
        m: usize,
        inputs: &[usize],
        hyper: Hyperparams,
        selector: OutputSelector,
        gains: GainParams,
        rng: &mut R,
    ) -> Result<Self> {
        if selector.c.ncols() != n || selector.d.ncols() != m {
            return Err(invalid("selector dimensions do not match the system"));
        }
        let metric =
            MetricNet::random_masked(n, inputs.to_vec(), hyper.hidden, hyper.w_floor, rng)?;
        let controller =
            ControllerNet::random_masked(n, m, inputs.to_vec(), hyper.hidden, hyper.c, rng)?;
        Ok(Self {
            system: system.to_string(),
            revision: 0,
            hyper,
            selector,
            metric,
            controller,
            gains,
            tubes: BTreeMap::new(),
            history: Vec::new(),
        })
    }

    /// The system this checkpoint was trained on, with its disturbance bound.
    pub fn system_model(&self) -> Result<ControlAffineSystem> {
        let mut sys = make_system_with(
            &self.system,
            SystemOptions {
                quad_drift: self.hyper.quad_drift,
            },
        )?;
        if sys.n() != self.metric.n() || sys.m() != self.controller.m() {
            return Err(invalid("checkpoint networks do not match the named system"));
        }
        sys.sigma = self.hyper.sigma;
        Ok(sys)
    }

    /// Network parameters as one flat vector: `θ_w`, then `θ_u1`, then `θ_u2`.
    pub fn flat_theta(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.metric.net.params().as_slice());
        v.extend_from_slice(self.controller.phi1.params().as_slice());
        v.extend_from_slice(self.controller.phi2.params().as_slice());
        v
    }

    pub fn set_flat_theta(&mut self, theta: &[f64]) -> Result<()> {
        let a = self.metric.net.params().len();
        let b = self.controller.phi1.params().len();
        let c = self.controller.phi2.params().len();
        if theta.len() != a + b + c {
            return Err(invalid("flat parameter vector has the wrong length"));
        }
        self.metric
            .net
            .params_mut()
            .as_mut_slice()
            .copy_from_slice(&theta[..a]);
        self.controller
            .phi1
            .params_mut()
            .as_mut_slice()
            .copy_from_slice(&theta[a..a + b]);
        self.controller
            .phi2
            .params_mut()
            .as_mut_slice()
            .copy_from_slice(&theta[a + b..]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, input_jacobian, Dual};
    use crate::numerics::{invert_spd, lambda_min};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-s..s)).collect()
    }

    #[test]
    fn zero_metric_network_gives_floor() {
        let m = MetricNet::new(Mlp2::zeros(3, 8, 9), 3, 0.1).unwrap();
        let w = m.metric_w(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(w.matrix(), &(DMatrix::identity(3, 3) * 0.1));
        let inv = invert_spd(&w).unwrap();
        for (a, b) in inv
            .matrix()
            .iter()
            .zip((DMatrix::<f64>::identity(3, 3) * 10.0).iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_is_symmetric_with_floor() {
        let mut r = rng(1);
        let m = MetricNet::random(4, 16, 0.1, &mut r).unwrap();
        for _ in 0..10_000 {
            let x = rand_vec(&mut r, 4, 3.0);
            let w = m.metric_w(&x).unwrap();
            assert!(w.is_exactly_symmetric());
            assert!(lambda_min(&w).unwrap() >= 0.1 - 1e-12);
        }
    }

    #[test]
    fn metric_partials_match_finite_differences() {
        let mut r = rng(2);
        let m = MetricNet::random(3, 16, 0.1, &mut r).unwrap();
        let x = rand_vec(&mut r, 3, 1.0);
        let (_, dw) = m.w_and_partials(&x);
        let fd = central_difference(|y| m.metric_generic::<f64>(y), &x, 1e-5);
        for k in 0..3 {
            for i in 0..9 {
                let want = fd[(i, k)];
                assert!((dw[k][(i / 3, i % 3)] - want).abs() <= 1e-6 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn masked_networks_ignore_excluded_coordinates() {
        let mut r = rng(9);
        let inputs = vec![1, 3];
        let m = MetricNet::random_masked(4, inputs.clone(), 8, 0.1, &mut r).unwrap();
        let ctl = ControllerNet::random_masked(4, 2, inputs, 8, 3, &mut r).unwrap();
        let x = rand_vec(&mut r, 4, 1.0);
        let xs = rand_vec(&mut r, 4, 1.0);
        let (_, dw) = m.w_and_partials(&x);
        assert_eq!(dw[0].norm(), 0.0);
        assert_eq!(dw[2].norm(), 0.0);
        let fd = central_difference(|y| m.metric_generic::<f64>(y), &x, 1e-5);
        for k in 0..4 {
            for i in 0..16 {
                assert!(
                    (dw[k][(i / 4, i % 4)] - fd[(i, k)]).abs() <= 1e-6 * (1.0 + fd[(i, k)].abs())
                );
            }
        }
        let us = [0.3, -0.2];
        let kmat = ctl.controller_k(&x, &xs, &us).unwrap();
        let fd = central_difference(|y| ctl.controller_generic::<f64>(y, &xs, &us), &x, 1e-6);
        assert!((&kmat - &fd).norm() < 1e-7);
        let mut x2 = x.clone();
        let mut xs2 = xs.clone();
        x2[0] += 3.0;
        xs2[0] += 3.0;
        let a = ctl.controller_u(&x, &xs, &us).unwrap();
        let b = ctl.controller_u(&x2, &xs2, &us).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        assert!(MetricNet::masked(Mlp2::zeros(2, 2, 16), 4, vec![3, 1], 0.1).is_err());
    }

    #[test]
    fn controller_matches_straight_line_formula() {
        let mut r = rng(3);
        let (n, m) = (4, 2);
        let ctl = ControllerNet::random(n, m, 16, 5, &mut r).unwrap();
        let x = rand_vec(&mut r, n, 1.0);
        let xs = rand_vec(&mut r, n, 1.0);
        let us = rand_vec(&mut r, m, 1.0);
        let mut inp = x.clone();
        inp.extend(&xs);
        let p1 = DMatrix::from_row_slice(5, n, &ctl.phi1.forward(&inp));
        let p2 = DMatrix::from_row_slice(m, 5, &ctl.phi2.forward(&inp));
        let e = nalgebra::DVector::from_iterator(n, x.iter().zip(&xs).map(|(a, b)| a - b));
        let s = (p1 * e).map(f64::tanh);
        let want = nalgebra::DVector::from_column_slice(&us) + p2 * s;
        let got = ctl.controller_u(&x, &xs, &us).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn controller_is_exact_on_diagonal_and_shift_equivariant() {
        let mut r = rng(4);
        for _ in 0..1000 {
            let ctl = ControllerNet::random(3, 2, 4, 2, &mut r).unwrap();
            let xs = rand_vec(&mut r, 3, 2.0);
            let us = rand_vec(&mut r, 2, 2.0);
            assert_eq!(ctl.controller_u(&xs, &xs, &us).unwrap(), us);
        }
        let ctl = ControllerNet::random(3, 2, 8, 3, &mut r).unwrap();
        let (x, xs) = (rand_vec(&mut r, 3, 1.0), rand_vec(&mut r, 3, 1.0));
        let a = ctl.controller_u(&x, &xs, &[0.0, 0.0]).unwrap();
        let b = ctl.controller_u(&x, &xs, &[0.5, -1.5]).unwrap();
        assert!((b[0] - a[0] - 0.5).abs() < 1e-12 && (b[1] - a[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn controller_gain_matches_finite_differences() {
        let mut r = rng(5);
        let ctl = ControllerNet::random(6, 2, 32, 8, &mut r).unwrap();
        for _ in 0..100 {
            let x = rand_vec(&mut r, 6, 1.0);
            let xs = rand_vec(&mut r, 6, 1.0);
            let us = rand_vec(&mut r, 2, 1.0);
            let k = ctl.controller_k(&x, &xs, &us).unwrap();
            let fd = central_difference(|y| ctl.u_unchecked(y, &xs, &us), &x, 1e-5);
            for (a, b) in k.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
            let ad = input_jacobian(|y: &[Dual]| ctl.controller_generic(y, &xs, &us), &x).unwrap();
            for (a, b) in k.iter().zip(ad.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn gain_on_diagonal_is_phi2_phi1() {
        let mut r = rng(6);
        let ctl = ControllerNet::random(3, 2, 8, 4, &mut r).unwrap();
        let xs = rand_vec(&mut r, 3, 1.0);
        let mut inp = xs.clone();
        inp.extend(&xs);
        let p1 = DMatrix::from_row_slice(4, 3, &ctl.phi1.forward(&inp));
        let p2 = DMatrix::from_row_slice(2, 4, &ctl.phi2.forward(&inp));
        let k = ctl.controller_k(&xs, &xs, &[0.0, 0.0]).unwrap();
        let want = p2 * p1;
        for (a, b) in k.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = ControllerNet::new(Mlp2::zeros(6, 4, 12), Mlp2::zeros(6, 4, 8), 3, 2).unwrap();
        assert_eq!(
            zero.controller_k(&[1.0; 3], &[0.0; 3], &[0.0; 2]).unwrap(),
            DMatrix::zeros(2, 3)
        );
    }

    #[test]
    fn gains_respect_ordering() {
        let g = GainParams::from_alpha_mu(4.0, 1.0).unwrap();
        assert!((g.alpha() - 4.0).abs() < 1e-12 && (g.mu() - 1.0).abs() < 1e-12);
        assert!(GainParams::from_alpha_mu(1.0, 1.0).is_err());
        assert!(GainParams::from_alpha_mu(2.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn gains_always_ordered(a in -40.0f64..40.0, b in -30.0f64..40.0) {
            let g = GainParams { raw_a: a, raw_b: b };
            prop_assert!(g.mu() > 0.0);
            prop_assert!(g.alpha() > g.mu());
        }

        #[test]
        fn diagonal_tracking_is_exact(seed in any::<u64>()) {
            let mut r = rng(seed);
            let ctl = ControllerNet::random(2, 1, 4, 3, &mut r).unwrap();
            let xs = rand_vec(&mut r, 2, 5.0);
            let us = rand_vec(&mut r, 1, 5.0);
            prop_assert_eq!(ctl.controller_u(&xs, &xs, &us).unwrap(), us);
        }
    }
}
