//! Small dense linear algebra and the sampled definiteness penalty.
//!
//! Everything here operates on matrices of dimension at most `n + l`
//! (thirteen for the quadrotor), so plain dense methods are used throughout.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Target absolute eigenvalue accuracy, relative to `1 + ‖X‖`.
pub const JACOBI_TOL: f64 = 1e-10;
/// Unit vectors per matrix used by the training loss.
pub const XI_TRAIN: usize = 16;
/// Unit vectors per matrix used by evaluation oracles.
pub const XI_EVAL: usize = 100_000;

/// A real symmetric matrix. Entries are symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let n = m.nrows();
        let mut inner = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inner[(i, j)] + inner[(j, i)]);
                inner[(i, j)] = v;
                inner[(j, i)] = v;
            }
        }
        Ok(Self { inner })
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::invalid("entry count does not match dimension"));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            inner: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            inner: &self.inner * c,
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        let mut inner = self.inner.clone();
        for i in 0..self.dim() {
            inner[(i, i)] += c;
        }
        Self { inner }
    }

    pub fn neg(&self) -> Self {
        self.scaled(-1.0)
    }

    pub fn is_exactly_symmetric(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.inner[(i, j)].to_bits() == self.inner[(j, i)].to_bits()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }
}

/// A deterministic set of unit vectors (the `η_j` of the penalty).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVectorSet {
    dim: usize,
    data: Vec<f64>,
}

impl UnitVectorSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Flat row-major storage, `count × dim`.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Draws `count` isotropic unit vectors in `R^dim`.
pub fn sample_unit_vectors(dim: usize, count: usize, seed: u64) -> Result<UnitVectorSet> {
    sample_unit_vectors_stream(dim, count, seed, 0)
}

/// Counter-based variant: `(seed, stream)` selects an independent ChaCha stream,
/// so callers can derive per-batch and per-sample vectors without sharing RNG state.
pub fn sample_unit_vectors_stream(
    dim: usize,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<UnitVectorSet> {
    if dim < 1 || count < 1 {
        return Err(Error::invalid(format!(
            "unit vector set needs dim >= 1 and count >= 1 (got {dim}, {count})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut data = Vec::with_capacity(dim * count);
    fill_unit_vectors(&mut rng, dim, count, &mut data);
    Ok(UnitVectorSet { dim, data })
}

/// SplitMix64 combination of two words, used to derive child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fill_unit_vectors<R: rand::Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    count: usize,
    out: &mut Vec<f64>,
) {
    let mut buf = vec![0.0; dim];
    for _ in 0..count {
        loop {
            for b in buf.iter_mut() {
                *b = StandardNormal.sample(rng);
            }
            let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                out.extend(buf.iter().map(|v| v / norm));
                break;
            }
        }
    }
}

/// One isotropic unit vector drawn from `rng`.
pub fn random_unit_vector<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    fill_unit_vectors(rng, dim, 1, &mut out);
    out
}

/// `(1/ξ) Σ_j max(0, −η_jᵀ X η_j)`.
pub fn penalty_pd(x: &SymMatrix, etas: &UnitVectorSet) -> Result<f64> {
    if etas.dim() != x.dim() {
        return Err(Error::invalid(format!(
            "unit vectors have dim {} but matrix has dim {}",
            etas.dim(),
            x.dim()
        )));
    }
    let m = x.matrix();
    let n = x.dim();
    let mut acc = 0.0;
    for eta in etas.iter() {
        let mut q = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += m[(i, j)] * eta[j];
            }
            q += eta[i] * row;
        }
        if q < 0.0 {
            acc -= q;
        }
    }
    Ok(acc / etas.count() as f64)
}

/// Eigenvalues (ascending) of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(x: &SymMatrix) -> Result<Vec<f64>> {
    let n = x.dim();
    let mut a: Vec<f64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            a.push(x.get(i, j));
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let mut ev = jacobi_eigenvalues(&mut a, n);
    ev.sort_by(|p, q| p.total_cmp(q));
    Ok(ev)
}

/// In-place cyclic Jacobi on a row-major `n × n` symmetric buffer; returns the diagonal.
pub(crate) fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = (1e-14 * scale).max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

pub fn lambda_max(x: &SymMatrix) -> Result<f64> {
    Ok(*sym_eigenvalues(x)?.last().expect("non-empty"))
}

pub fn lambda_min(x: &SymMatrix) -> Result<f64> {
    Ok(sym_eigenvalues(x)?[0])
}

/// Spectral norm of a general matrix, `sqrt(λ_max(AᵀA))`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let gram = if a.nrows() < a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    match SymMatrix::new(gram) {
        Ok(g) => lambda_max(&g)
            .map(|v| v.max(0.0).sqrt())
            .unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Cholesky-based inverse of a row-major SPD buffer. Writes the symmetrized inverse into `out`.
pub(crate) fn spd_inverse_into(a: &[f64], n: usize, out: &mut [f64]) -> Result<()> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d >= 1e-12) {
            return Err(Error::SingularMetric { index: j, pivot: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for j in 0..n {
        linv[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = s / l[i * n + i];
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix.
pub fn invert_spd(w: &SymMatrix) -> Result<SymMatrix> {
    let n = w.dim();
    let a: Vec<f64> = (0..n * n).map(|k| w.get(k / n, k % n)).collect();
    let mut out = vec![0.0; n * n];
    spd_inverse_into(&a, n, &mut out)?;
    SymMatrix::from_row_slice(n, &out)
}

/// Orthonormal basis of the orthogonal complement of `range(B)`, so that `B_⊥ᵀ B = 0`.
///
/// Columns of `B` are orthogonalized with greedy largest-residual pivoting; the
/// complement is then completed from the standard basis with the same rule
/// (ties go to the lowest index), which makes the result a deterministic function of `B`.
pub fn null_space_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("input matrix has non-finite entries"));
    }
    let tol = 1e-10 * b.norm().max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();

    let mut remaining: Vec<DVector<f64>> = b.column_iter().map(|c| c.into_owned()).collect();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in remaining.iter().enumerate() {
            let r = residual(v, &basis).norm();
            if best.is_none_or(|(_, bn)| r > bn) {
                best = Some((k, r));
            }
        }
        match best {
            Some((k, r)) if r > tol => {
                let v = remaining.remove(k);
                let mut q = residual(&v, &basis);
                q = residual(&q, &basis);
                let nq = q.norm();
                basis.push(q / nq);
            }
            _ => break,
        }
    }
    let rank = basis.len();
    if rank >= n {
        return Err(Error::EmptyAnnihilator);
    }

    let mut complement: Vec<DVector<f64>> = Vec::with_capacity(n - rank);
    while basis.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
            let r = residual(&e, &basis).norm();
            if best.is_none_or(|(_, bn)| r > bn + 1e-12) {
                best = Some((i, r));
            }
        }
        let (i, _) = best.expect("n > 0");
        let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        let mut q = residual(&e, &basis);
        q = residual(&q, &basis);
        let q = &q / q.norm();
        basis.push(q.clone());
        complement.push(q);
    }
    Ok(DMatrix::from_columns(&complement))
}

fn residual(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut r = v.clone();
    for q in basis {
        let c = q.dot(&r);
        r.axpy(-c, q, 1.0);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_vectors_in_one_dimension_are_signs() {
        let set = sample_unit_vectors(1, 3, 11).unwrap();
        for v in set.iter() {
            assert!(v[0] == 1.0 || v[0] == -1.0);
        }
    }

    #[test]
    fn unit_vectors_are_deterministic_and_normalized() {
        let a = sample_unit_vectors(4, 16, 7).unwrap();
        let b = sample_unit_vectors(4, 16, 7).unwrap();
        assert_eq!(a, b);
        for v in a.iter() {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let c = sample_unit_vectors_stream(4, 16, 7, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_vectors_have_zero_mean() {
        let set = sample_unit_vectors(2, 100_000, 3).unwrap();
        for k in 0..2 {
            let mean: f64 = set.iter().map(|v| v[k]).sum::<f64>() / 100_000.0;
            assert!(mean.abs() < 0.01, "coordinate {k} mean {mean}");
        }
    }

    #[test]
    fn unit_vectors_reject_empty() {
        assert!(matches!(
            sample_unit_vectors(0, 3, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            sample_unit_vectors(3, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn penalty_of_identity_and_negative_identity() {
        for dim in 1..6 {
            let etas = sample_unit_vectors(dim, 64, dim as u64).unwrap();
            let id = SymMatrix::identity(dim);
            assert_eq!(penalty_pd(&id, &etas).unwrap(), 0.0);
            let p = penalty_pd(&id.neg(), &etas).unwrap();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_of_saddle_matches_circle_integral() {
        // Oracle: (1/2π)∫ max(0, −cos 2θ) dθ by midpoint quadrature.
        let steps = 200_000;
        let oracle: f64 = (0..steps)
            .map(|k| {
                let th = (k as f64 + 0.5) * std::f64::consts::TAU / steps as f64;
                (-(2.0 * th).cos()).max(0.0)
            })
            .sum::<f64>()
            / steps as f64;
        assert!((oracle - 1.0 / std::f64::consts::PI).abs() < 1e-9);
        let x = SymMatrix::from_diagonal(&[1.0, -1.0]).unwrap();
        let etas = sample_unit_vectors(2, XI_EVAL, 5).unwrap();
        let p = penalty_pd(&x, &etas).unwrap();
        assert!((p - oracle).abs() < 0.02, "{p} vs {oracle}");
    }

    #[test]
    fn penalty_rejects_dimension_mismatch() {
        let etas = sample_unit_vectors(3, 4, 1).unwrap();
        assert!(penalty_pd(&SymMatrix::identity(2), &etas).is_err());
    }

    #[test]
    fn lambda_max_examples() {
        let d = SymMatrix::from_diagonal(&[3.0, 1.0]).unwrap();
        assert_relative_eq!(lambda_max(&d).unwrap(), 3.0, epsilon = 1e-12);
        let m = SymMatrix::from_row_slice(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(lambda_max(&m).unwrap(), 3.0, epsilon = 1e-12);
        let shifted = m.shifted(2.5);
        assert_relative_eq!(lambda_max(&shifted).unwrap(), 5.5, epsilon = 1e-12);
    }

    #[test]
    fn lambda_max_rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(SymMatrix::new(m).is_err());
    }

    /// Largest root of the characteristic polynomial as `inf{λ : λI − A ≻ 0}`, with
    /// positivity decided by Sylvester's criterion on leading principal minors.
    fn charpoly_lambda_max(a: &[f64], n: usize) -> f64 {
        let minor_positive = |lam: f64| -> bool {
            let m: Vec<f64> = (0..n * n)
                .map(|k| if k / n == k % n { lam - a[k] } else { -a[k] })
                .collect();
            let d1 = m[0];
            let d2 = m[0] * m[n + 1] - m[1] * m[n];
            if n == 2 {
                return d1 > 0.0 && d2 > 0.0;
            }
            let d3 = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6]);
            d1 > 0.0 && d2 > 0.0 && d3 > 0.0
        };
        let r = a.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        let (mut lo, mut hi) = (-r, r);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if minor_positive(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn lambda_max_matches_characteristic_polynomial_on_2x2_integer_matrices() {
        let vals = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        for &a in &vals {
            for &b in &vals {
                for &d in &vals {
                    let m = [a, b, b, d];
                    let x = SymMatrix::from_row_slice(2, &m).unwrap();
                    let got = lambda_max(&x).unwrap();
                    let want = charpoly_lambda_max(&m, 2);
                    assert!((got - want).abs() < 1e-8, "{m:?}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn lambda_max_matches_characteristic_polynomial_on_3x3_integer_matrices() {
        let vals = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let mut idx = [0usize; 6];
        loop {
            let [a, b, c, d, e, f] = idx.map(|i| vals[i]);
            let m = [a, b, c, b, d, e, c, e, f];
            let x = SymMatrix::from_row_slice(3, &m).unwrap();
            let got = lambda_max(&x).unwrap();
            let want = charpoly_lambda_max(&m, 3);
            assert!((got - want).abs() < 1e-8, "{m:?}: {got} vs {want}");
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < vals.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == 6 {
                    return;
                }
            }
        }
    }

    #[test]
    fn invert_spd_examples() {
        let id = SymMatrix::identity(3);
        assert_eq!(invert_spd(&id).unwrap(), id);
        let d = SymMatrix::from_diagonal(&[2.0, 4.0]).unwrap();
        let inv = invert_spd(&d).unwrap();
        assert_relative_eq!(inv.get(0, 0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(inv.get(1, 1), 0.25, epsilon = 1e-15);
        assert_eq!(inv.get(0, 1), 0.0);
    }

    #[test]
    fn invert_spd_random_residual() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let w = SymMatrix::new(&a * a.transpose() + DMatrix::identity(6, 6) * 0.1).unwrap();
            let m = invert_spd(&w).unwrap();
            let r = (m.matrix() * w.matrix() - DMatrix::identity(6, 6)).norm();
            assert!(r <= 1e-8 * 6.0, "residual {r}");
            assert!(m.is_exactly_symmetric());
        }
    }

    #[test]
    fn invert_spd_rejects_indefinite() {
        let d = SymMatrix::from_diagonal(&[1.0, -1.0]).unwrap();
        assert!(matches!(
            invert_spd(&d),
            Err(Error::SingularMetric { index: 1, .. })
        ));
    }

    #[test]
    fn null_space_examples() {
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let bp = null_space_basis(&b).unwrap();
        assert_eq!(bp.ncols(), 1);
        assert_relative_eq!(bp[(0, 0)].abs(), 1.0, epsilon = 1e-15);
        assert_eq!(bp[(1, 0)], 0.0);

        let zero = DMatrix::zeros(3, 2);
        assert_eq!(null_space_basis(&zero).unwrap(), DMatrix::identity(3, 3));

        let full = DMatrix::identity(2, 2);
        assert!(matches!(
            null_space_basis(&full),
            Err(Error::EmptyAnnihilator)
        ));
    }

    #[test]
    fn null_space_of_pvtol_input_matrix() {
        let (m, l, j) = (0.486, 0.25, 0.00383);
        let mut b = DMatrix::zeros(6, 2);
        b[(4, 0)] = 1.0 / m;
        b[(4, 1)] = 1.0 / m;
        b[(5, 0)] = l / j;
        b[(5, 1)] = -l / j;
        let bp = null_space_basis(&b).unwrap();
        assert_eq!(bp.ncols(), 4);
        let gram = bp.transpose() * &bp;
        assert!((gram - DMatrix::identity(4, 4)).norm() < 1e-12);
        assert!((bp.transpose() * &b).norm() <= 1e-10 * b.norm());
        // Rows 5 and 6 of B are independent, so the complement lives in rows 1..4.
        for k in 0..4 {
            assert_eq!(bp[(4, k)], 0.0);
            assert_eq!(bp[(5, k)], 0.0);
        }
    }

    proptest! {
        #[test]
        fn penalty_vanishes_on_psd(a in proptest::collection::vec(-2.0f64..2.0, 9), seed in 0u64..1000) {
            let am = DMatrix::from_row_slice(3, 3, &a);
            let x = SymMatrix::new(&am * am.transpose()).unwrap();
            let etas = sample_unit_vectors(3, 32, seed).unwrap();
            prop_assert_eq!(penalty_pd(&x, &etas).unwrap(), 0.0);
        }

        #[test]
        fn penalty_is_positively_homogeneous(a in proptest::collection::vec(-2.0f64..2.0, 9), c in 0.01f64..10.0) {
            let x = SymMatrix::from_row_slice(3, &a).unwrap();
            let etas = sample_unit_vectors(3, 32, 9).unwrap();
            let p1 = penalty_pd(&x, &etas).unwrap();
            let p2 = penalty_pd(&x.scaled(c), &etas).unwrap();
            prop_assert!((p2 - c * p1).abs() <= 1e-12 * (1.0 + c * p1));
        }

        #[test]
        fn null_space_residuals(b in proptest::collection::vec(-3.0f64..3.0, 10)) {
            let bm = DMatrix::from_column_slice(5, 2, &b);
            let bp = null_space_basis(&bm).unwrap();
            let gram = bp.transpose() * &bp;
            prop_assert!((gram - DMatrix::identity(bp.ncols(), bp.ncols())).norm() < 1e-10);
            prop_assert!((bp.transpose() * &bm).norm() <= 1e-10 * bm.norm().max(1.0));
            prop_assert_eq!(null_space_basis(&bm).unwrap(), bp);
        }
    }
}
