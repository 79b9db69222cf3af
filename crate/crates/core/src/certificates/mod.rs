//! Certificate matrices and the training loss.
//!
//! [`certificate_matrices`] assembles every matrix for one sample with plain dense
//! algebra. [`loss`] builds the same quantities for a whole batch on the
//! differentiation tape; the two are written independently and checked
//! against each other.

pub mod loss;

pub use loss::{
    loss_and_gradient, sample_etas, total_loss, LossBreakdown, LossGradient, LossOptions,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::certnets::CertificateCheckpoint;
use crate::error::{invalid, Error, Result};
use crate::numerics::SymMatrix;
use crate::systems::{ControlAffineSystem, OutputSelector};

/// One point of `X × X × U × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: Vec<f64>,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub w: Vec<f64>,
}

impl SamplePoint {
    pub fn check(&self, sys: &ControlAffineSystem) -> Result<()> {
        if self.x.len() != sys.n()
            || self.x_star.len() != sys.n()
            || self.u_star.len() != sys.m()
            || self.w.len() != sys.l()
        {
            return Err(invalid("sample dimensions do not match the system"));
        }
        Ok(())
    }

    /// Concatenation `(x, x*, u*, w)`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend(&self.x_star);
        v.extend(&self.u_star);
        v.extend(&self.w);
        v
    }

    pub fn unflatten(sys: &ControlAffineSystem, v: &[f64]) -> Result<Self> {
        let (n, m, l) = (sys.n(), sys.m(), sys.l());
        if v.len() != 2 * n + m + l {
            return Err(invalid("flattened sample has the wrong length"));
        }
        Ok(Self {
            x: v[..n].to_vec(),
            x_star: v[n..2 * n].to_vec(),
            u_star: v[2 * n..2 * n + m].to_vec(),
            w: v[2 * n + m..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WSampling {
    /// Uniform direction times a uniform radius in `[0, σ]`.
    #[default]
    BallUniformRadius,
    /// Uniform on the box `[−σ, σ]^l`.
    Box,
}

impl std::str::FromStr for WSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball_uniform_radius" => Ok(Self::BallUniformRadius),
            "box" => Ok(Self::Box),
            other => Err(invalid(format!("unknown w_sampling {other:?}"))),
        }
    }
}

impl std::fmt::Display for WSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BallUniformRadius => "ball_uniform_radius",
            Self::Box => "box",
        })
    }
}

pub fn sample_disturbance<R: Rng + ?Sized>(
    l: usize,
    sigma: f64,
    mode: WSampling,
    rng: &mut R,
) -> Vec<f64> {
    match mode {
        WSampling::Box => (0..l).map(|_| rng.random_range(-sigma..=sigma)).collect(),
        WSampling::BallUniformRadius => {
            let dir = crate::numerics::random_unit_vector(l, rng);
            let r = rng.random_range(0.0..=sigma);
            dir.into_iter().map(|d| d * r).collect()
        }
    }
}

/// Draws one sample: `x, x*` uniform on `X`, `u*` uniform on `U`, `w` per `mode`.
pub fn sample_point<R: Rng + ?Sized>(
    sys: &ControlAffineSystem,
    sigma: f64,
    mode: WSampling,
    rng: &mut R,
) -> SamplePoint {
    SamplePoint {
        x: sys.x_set.sample(rng),
        x_star: sys.x_set.sample(rng),
        u_star: sys.u_set.sample(rng),
        w: sample_disturbance(sys.l(), sigma, mode, rng),
    }
}

/// All certificate matrices at one sample, with their intermediates.
#[derive(Debug, Clone)]
pub struct CertificateMatrices {
    pub c1: SymMatrix,
    pub c2: SymMatrix,
    pub c3: Option<SymMatrix>,
    pub c4: Vec<SymMatrix>,
    pub u: Vec<f64>,
    pub k: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub w_dot: DMatrix<f64>,
    pub m_dot: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub xdot: Vec<f64>,
    /// Top-left block of `C1` without the `μ` term: `⟨M𝒜⟩ + Ṁ + λM`.
    pub c1_top_left: DMatrix<f64>,
    /// `M B_w`.
    pub m_bw: DMatrix<f64>,
    /// `𝒞 = C + D K` for the selector used.
    pub cal_c: DMatrix<f64>,
}

fn sym(x: &DMatrix<f64>) -> DMatrix<f64> {
    x + x.transpose()
}

/// `W` and `M = W⁻¹` from the metric network.
fn metric_and_inverse(
    ck: &CertificateCheckpoint,
    x: &[f64],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let (w, dw) = ck.metric.w_and_partials(x);
    let m = crate::numerics::invert_spd(&SymMatrix::new(w.clone())?)?.into_matrix();
    Ok((w, dw, m))
}

fn directional(partials: &[DMatrix<f64>], v: &[f64]) -> DMatrix<f64> {
    let n = partials[0].nrows();
    let mut out = DMatrix::zeros(n, n);
    for (p, vk) in partials.iter().zip(v) {
        out += p * *vk;
    }
    out
}

/// `f(x) + B(x)(u* + k(x, x*)) + B_w(x)w`.
pub fn closed_loop_xdot(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    s: &SamplePoint,
) -> Result<Vec<f64>> {
    s.check(sys)?;
    let u = ck.controller.controller_u(&s.x, &s.x_star, &s.u_star)?;
    sys.dynamics(&s.x, &u, &s.w)
}

/// `𝒞 = C + D K`.
pub fn calligraphic_c(sel: &OutputSelector, k: &DMatrix<f64>) -> DMatrix<f64> {
    &sel.c + &sel.d * k
}

/// Every matrix of the robust contraction conditions at `s`.
pub fn certificate_matrices(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    s: &SamplePoint,
) -> Result<CertificateMatrices> {
    s.check(sys)?;
    let (n, l) = (sys.n(), sys.l());
    if sel.c.ncols() != n || sel.d.ncols() != sys.m() {
        return Err(invalid("selector dimensions do not match the system"));
    }
    let lambda = ck.hyper.lambda;
    let (mu, alpha) = (ck.gains.mu(), ck.gains.alpha());
    let lin = sys.linearize(&s.x)?;
    let (u, k) = ck
        .controller
        .controller_u_and_k(&s.x, &s.x_star, &s.u_star)?;
    let xdot: Vec<f64> = (&lin.f
        + &lin.b * DVector::from_column_slice(&u)
        + &lin.bw * DVector::from_column_slice(&s.w))
    .iter()
    .copied()
    .collect();
    let (w, dw, m) = metric_and_inverse(ck, &s.x)?;
    let w_dot = directional(&dw, &xdot);
    let m_dot = -(&m * &w_dot * &m);
    let a = lin.matrix_a(&u, &s.w);
    let a_cl = &a + &lin.b * &k;
    let c1_top_left = sym(&(&m * &a_cl)) + &m_dot + &m * lambda;
    let m_bw = &m * &lin.bw;

    let mut c1 = DMatrix::zeros(n + l, n + l);
    c1.view_mut((0, 0), (n, n)).copy_from(&c1_top_left);
    c1.view_mut((0, n), (n, l)).copy_from(&m_bw);
    c1.view_mut((n, 0), (l, n)).copy_from(&m_bw.transpose());
    c1.view_mut((n, n), (l, l))
        .copy_from(&(DMatrix::identity(l, l) * -mu));

    let cal_c = calligraphic_c(sel, &k);
    let mut c2 = DMatrix::zeros(n + l, n + l);
    c2.view_mut((0, 0), (n, n))
        .copy_from(&(&m * lambda - cal_c.transpose() * &cal_c / alpha));
    c2.view_mut((n, n), (l, l))
        .copy_from(&(DMatrix::identity(l, l) * (alpha - mu)));

    let (c3, c4) = match sys.b_perp(&s.x) {
        Ok(bp) => {
            let sign = ck.hyper.lie_sign.factor();
            let df_w = directional(&dw, lin.f.as_slice());
            let inner = df_w * sign + sym(&(&lin.jac_f * &w)) + &w * (2.0 * lambda);
            let c3 = SymMatrix::new(bp.transpose() * inner * &bp)?;
            let c4 = (0..sys.m())
                .map(|j| {
                    let bj: Vec<f64> = lin.b.column(j).iter().copied().collect();
                    let db_w = directional(&dw, &bj);
                    let inner = db_w - sym(&(&lin.jac_b[j] * &w));
                    SymMatrix::new(bp.transpose() * inner * &bp)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(c3), c4)
        }
        Err(Error::EmptyAnnihilator) => (None, Vec::new()),
        Err(e) => return Err(e),
    };

    Ok(CertificateMatrices {
        c1: SymMatrix::new(c1)?,
        c2: SymMatrix::new(c2)?,
        c3,
        c4,
        u,
        k,
        w,
        m,
        w_dot,
        m_dot,
        a,
        a_cl,
        xdot,
        c1_top_left,
        m_bw,
        cal_c,
    })
}

pub fn build_c1(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    s: &SamplePoint,
) -> Result<SymMatrix> {
    Ok(certificate_matrices(sys, ck, &ck.selector, s)?.c1)
}

pub fn build_c2(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    s: &SamplePoint,
) -> Result<SymMatrix> {
    Ok(certificate_matrices(sys, ck, sel, s)?.c2)
}

fn state_only_sample(sys: &ControlAffineSystem, x: &[f64]) -> SamplePoint {
    SamplePoint {
        x: x.to_vec(),
        x_star: x.to_vec(),
        u_star: vec![0.0; sys.m()],
        w: vec![0.0; sys.l()],
    }
}

/// The unactuated-direction condition; fails with `EmptyAnnihilator` when `B` has full row rank.
pub fn build_c3(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    x: &[f64],
) -> Result<SymMatrix> {
    certificate_matrices(sys, ck, &ck.selector, &state_only_sample(sys, x))?
        .c3
        .ok_or(Error::EmptyAnnihilator)
}

pub fn build_c4(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    x: &[f64],
) -> Result<Vec<SymMatrix>> {
    let mats = certificate_matrices(sys, ck, &ck.selector, &state_only_sample(sys, x))?;
    if mats.c3.is_none() {
        return Err(Error::EmptyAnnihilator);
    }
    Ok(mats.c4)
}
