//! Forward-mode dual numbers with a fixed-width tangent block.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Maximum number of simultaneous tangent directions carried by [`Dual`].
pub const MAX_TANGENTS: usize = 16;

/// Scalar arithmetic shared by `f64` and [`Dual`], so model code can be
/// written once and evaluated either plainly or with derivatives.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
}

/// `re + Σ_k eps[k]·ε_k` with nilpotent, mutually annihilating `ε_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: [f64; MAX_TANGENTS],
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Self {
            re,
            eps: [0.0; MAX_TANGENTS],
        }
    }

    /// A variable seeded with unit tangent in direction `k`.
    pub fn variable(re: f64, k: usize) -> Self {
        let mut d = Self::constant(re);
        d.eps[k] = 1.0;
        d
    }

    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= df;
        }
        Self { re: f, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(mut self, rhs: Dual) -> Dual {
        self.re += rhs.re;
        for k in 0..MAX_TANGENTS {
            self.eps[k] += rhs.eps[k];
        }
        self
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(mut self, rhs: Dual) -> Dual {
        self.re -= rhs.re;
        for k in 0..MAX_TANGENTS {
            self.eps[k] -= rhs.eps[k];
        }
        self
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        let mut eps = [0.0; MAX_TANGENTS];
        for (k, e) in eps.iter_mut().enumerate() {
            *e = self.re * rhs.eps[k] + self.eps[k] * rhs.re;
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        self * rhs.recip()
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        self.chain(-self.re, -1.0)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn add(mut self, rhs: f64) -> Dual {
        self.re += rhs;
        self
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn sub(mut self, rhs: f64) -> Dual {
        self.re -= rhs;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: f64) -> Dual {
        self.chain(self.re * rhs, rhs)
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: f64) -> Dual {
        self.chain(self.re / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, rhs: Dual) {
        *self = *self - rhs;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, rhs: Dual) {
        *self = *self * rhs;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    fn re(&self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.re;
        self.chain(r, -r * r)
    }
}

fn check_input(at: &[f64]) -> Result<()> {
    if at.len() > MAX_TANGENTS {
        return Err(Error::Graph(format!(
            "forward mode supports at most {MAX_TANGENTS} input coordinates, got {}",
            at.len()
        )));
    }
    if at.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("evaluation point has non-finite entries"));
    }
    Ok(())
}

/// Jacobian `J[i][j] = ∂f_i/∂x_j` by one forward sweep seeding every input coordinate.
pub fn input_jacobian<F>(f: F, at: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[Dual]) -> Vec<Dual>,
{
    check_input(at)?;
    let xs: Vec<Dual> = at
        .iter()
        .enumerate()
        .map(|(k, &v)| Dual::variable(v, k))
        .collect();
    let out = f(&xs);
    Ok(DMatrix::from_fn(out.len(), at.len(), |i, j| out[i].eps[j]))
}

/// Jacobian-vector product `J(at)·direction` using a single tangent.
pub fn directional_derivative<F>(f: F, at: &[f64], direction: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[Dual]) -> Vec<Dual>,
{
    check_input(at)?;
    if direction.len() != at.len() {
        return Err(Error::invalid(format!(
            "direction has dim {} but point has dim {}",
            direction.len(),
            at.len()
        )));
    }
    let xs: Vec<Dual> = at
        .iter()
        .zip(direction)
        .map(|(&v, &d)| {
            let mut x = Dual::constant(v);
            x.eps[0] = d;
            x
        })
        .collect();
    Ok(f(&xs).iter().map(|y| y.eps[0]).collect())
}

/// Central finite-difference Jacobian; used as an independent oracle in tests.
pub fn central_difference<F>(f: F, at: &[f64], step: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = f(at).len();
    let mut jac = DMatrix::zeros(m, at.len());
    let mut xp = at.to_vec();
    for j in 0..at.len() {
        let orig = xp[j];
        xp[j] = orig + step;
        let fp = f(&xp);
        xp[j] = orig - step;
        let fm = f(&xp);
        xp[j] = orig;
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}
