//! Batched reverse-mode tape.
//!
//! Every node holds a `[batch, rows, cols]` tensor. A node with batch 1 broadcasts
//! against batched operands, which is how shared parameters enter per-sample
//! computations.
//!
//! Input tangents are carried in-graph using the *dual-row* convention: a tensor
//! `[B, 1 + k, d]` stores the primal value in row 0 and `k` directional
//! derivatives in rows `1..=k`. [`Graph::rows_matmul_t`], [`Graph::add_bias_row0`],
//! [`Graph::tanh_jvp`] and [`Graph::mul_jvp`] propagate that convention, so a
//! network evaluated on dual rows yields its input Jacobian as ordinary graph
//! nodes. A single reverse sweep then differentiates losses that contain those
//! Jacobians with respect to the parameters.

use crate::error::{Error, Result};
use crate::numerics::spd_inverse_into;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(batch: usize, rows: usize, cols: usize) -> Self {
        Self { batch, rows, cols }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.batch * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mat(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    RowsMatmulT {
        x: Var,
        w: Var,
    },
    AddBiasRow0 {
        x: Var,
        b: Var,
    },
    TanhJvp(Var),
    MulJvp(Var, Var),
    Reshape(Var),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    BMatmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Square(Var),
    Tanh(Var),
    Softplus(Var),
    ScaleRows {
        x: Var,
        v: Var,
    },
    Sym(Var),
    AddIdentity(Var),
    ScalarIdentity(Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    SpdInverse(Var),
    Block {
        blocks: [Option<Var>; 4],
        p: usize,
    },
    PenaltyPd {
        x: Var,
        etas: Vec<f64>,
        count: usize,
    },
    FrobNorm(Var),
    SumBatch {
        x: Var,
        scale: f64,
    },
    SumAll(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
}

/// Recorded computation with cached forward values.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that influences it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when `v` does not reach the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn bidx(b: usize, batch: usize) -> usize {
    if batch == 1 {
        0
    } else {
        b
    }
}

fn broadcast_batch(a: Shape, b: Shape) -> Result<usize> {
    match (a.batch, b.batch) {
        (x, y) if x == y => Ok(x),
        (1, y) => Ok(y),
        (x, 1) => Ok(x),
        (x, y) => Err(Error::Graph(format!("batch mismatch {x} vs {y}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Matrix `b` of node `v` as a row-major slice.
    pub fn matrix(&self, v: Var, b: usize) -> &[f64] {
        let s = self.shape(v);
        let m = s.mat();
        let b = bidx(b, s.batch);
        &self.nodes[v.0].value[b * m..(b + 1) * m]
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        if shape.len() != value.len() {
            return Err(Error::Graph(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(Op::Constant, shape, value))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        if shape.len() != value.len() {
            return Err(Error::Graph(format!(
                "parameter of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(Op::Param, shape, value))
    }

    pub fn scalar_param(&mut self, v: f64) -> Var {
        self.push(Op::Param, Shape::scalar(), vec![v])
    }

    /// `x · wᵀ` applied to every row: `x` is `[B, R, din]`, `w` is `[1, dout, din]`.
    pub fn rows_matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.batch != 1 || ws.cols != xs.cols {
            return Err(Error::Graph(format!(
                "rows_matmul_t shapes {xs:?} x {ws:?}"
            )));
        }
        let (m, k, n) = (xs.batch * xs.rows, xs.cols, ws.rows);
        let mut out = vec![0.0; m * n];
        // SAFETY: buffer lengths match the stated dimensions and strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.value(x).as_ptr(),
                k as isize,
                1,
                self.value(w).as_ptr(),
                1,
                k as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push(
            Op::RowsMatmulT { x, w },
            Shape::new(xs.batch, xs.rows, n),
            out,
        ))
    }

    /// Adds bias `b` (`[1, 1, d]`) to row 0 of every batch entry; tangent rows are untouched.
    pub fn add_bias_row0(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.batch != 1 || bs.rows != 1 || bs.cols != xs.cols {
            return Err(Error::Graph(format!(
                "add_bias_row0 shapes {xs:?} + {bs:?}"
            )));
        }
        let mut out = self.value(x).to_vec();
        let bias = self.value(b);
        let m = xs.mat();
        for bi in 0..xs.batch {
            for (o, bv) in out[bi * m..bi * m + xs.cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBiasRow0 { x, b }, xs, out))
    }

    /// Dual-row tanh: row 0 ← tanh(a₀), row r ← (1 − tanh²(a₀)) ⊙ a_r.
    pub fn tanh_jvp(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let (r, c) = (s.rows, s.cols);
        for b in 0..s.batch {
            let base = b * r * c;
            for j in 0..c {
                let y = xv[base + j].tanh();
                out[base + j] = y;
                let d = 1.0 - y * y;
                for row in 1..r {
                    out[base + row * c + j] = d * xv[base + row * c + j];
                }
            }
        }
        self.push(Op::TanhJvp(x), s, out)
    }

    /// Dual-row product: row 0 ← a₀ ⊙ b₀, row r ← a₀ ⊙ b_r + a_r ⊙ b₀.
    pub fn mul_jvp(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if s != self.shape(b) {
            return Err(Error::Graph("mul_jvp shape mismatch".into()));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; av.len()];
        let (r, c) = (s.rows, s.cols);
        for bi in 0..s.batch {
            let base = bi * r * c;
            for j in 0..c {
                let (a0, b0) = (av[base + j], bv[base + j]);
                out[base + j] = a0 * b0;
                for row in 1..r {
                    let k = base + row * c + j;
                    out[k] = a0 * bv[k] + av[k] * b0;
                }
            }
        }
        Ok(self.push(Op::MulJvp(a, b), s, out))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.mat() != rows * cols {
            return Err(Error::Graph(format!(
                "cannot reshape {s:?} to {rows}x{cols}"
            )));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), Shape::new(s.batch, rows, cols), v))
    }

    /// Stacks `a` above `b` in every batch entry.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(Error::Graph(format!(
                "concat_rows shapes {sa:?} and {sb:?}"
            )));
        }
        let batch = broadcast_batch(sa, sb)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(batch * (sa.mat() + sb.mat()));
        for bi in 0..batch {
            let ao = bidx(bi, sa.batch) * sa.mat();
            let bo = bidx(bi, sb.batch) * sb.mat();
            out.extend_from_slice(&av[ao..ao + sa.mat()]);
            out.extend_from_slice(&bv[bo..bo + sb.mat()]);
        }
        Ok(self.push(
            Op::ConcatRows(a, b),
            Shape::new(batch, sa.rows + sb.rows, sa.cols),
            out,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.rows {
            return Err(Error::Graph(format!(
                "row slice {start}+{len} out of {s:?}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(s.batch * len * s.cols);
        for b in 0..s.batch {
            let base = b * s.mat() + start * s.cols;
            out.extend_from_slice(&xv[base..base + len * s.cols]);
        }
        Ok(self.push(
            Op::SliceRows { x, start },
            Shape::new(s.batch, len, s.cols),
            out,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.cols {
            return Err(Error::Graph(format!(
                "col slice {start}+{len} out of {s:?}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(s.batch * s.rows * len);
        for b in 0..s.batch {
            for i in 0..s.rows {
                let base = b * s.mat() + i * s.cols + start;
                out.extend_from_slice(&xv[base..base + len]);
            }
        }
        Ok(self.push(
            Op::SliceCols { x, start },
            Shape::new(s.batch, s.rows, len),
            out,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..s.batch {
            let base = b * s.mat();
            for i in 0..s.rows {
                for j in 0..s.cols {
                    out[base + j * s.rows + i] = xv[base + i * s.cols + j];
                }
            }
        }
        self.push(Op::Transpose(x), Shape::new(s.batch, s.cols, s.rows), out)
    }

    /// Batched matrix product with batch broadcasting.
    pub fn bmatmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::Graph(format!("bmatmul shapes {sa:?} x {sb:?}")));
        }
        let batch = broadcast_batch(sa, sb)?;
        let (r, k, c) = (sa.rows, sa.cols, sb.cols);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * r * c];
        for bi in 0..batch {
            let ao = bidx(bi, sa.batch) * r * k;
            let bo = bidx(bi, sb.batch) * k * c;
            let oo = bi * r * c;
            for i in 0..r {
                for p in 0..k {
                    let aip = av[ao + i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[bo + p * c..bo + (p + 1) * c];
                    let orow = &mut out[oo + i * c..oo + (i + 1) * c];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += aip * bb;
                    }
                }
            }
        }
        Ok(self.push(Op::BMatmul(a, b), Shape::new(batch, r, c), out))
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rows != sb.rows || sa.cols != sb.cols {
            return Err(Error::Graph(format!("elementwise shapes {sa:?} vs {sb:?}")));
        }
        let batch = broadcast_batch(sa, sb)?;
        let m = sa.mat();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(batch * m);
        for bi in 0..batch {
            let ao = bidx(bi, sa.batch) * m;
            let bo = bidx(bi, sb.batch) * m;
            out.extend((0..m).map(|k| f(av[ao + k], bv[bo + k])));
        }
        Ok(self.push(op, Shape::new(batch, sa.rows, sa.cols), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let s = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(op, s, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `x[b, i, j] · v[b, i, 0]`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv.rows != sx.rows || sv.cols != 1 || sv.batch != sx.batch {
            return Err(Error::Graph(format!("scale_rows shapes {sx:?} by {sv:?}")));
        }
        let (xv, vv) = (self.value(x), self.value(v));
        let mut out = xv.to_vec();
        for b in 0..sx.batch {
            for i in 0..sx.rows {
                let f = vv[b * sx.rows + i];
                let base = b * sx.mat() + i * sx.cols;
                for o in &mut out[base..base + sx.cols] {
                    *o *= f;
                }
            }
        }
        Ok(self.push(Op::ScaleRows { x, v }, sx, out))
    }

    /// `X + Xᵀ`.
    pub fn sym(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rows != s.cols {
            return Err(Error::Graph("sym of non-square".into()));
        }
        let n = s.rows;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..s.batch {
            let base = b * n * n;
            for i in 0..n {
                for j in 0..n {
                    out[base + i * n + j] = xv[base + i * n + j] + xv[base + j * n + i];
                }
            }
        }
        Ok(self.push(Op::Sym(x), s, out))
    }

    /// `X + c·I`.
    pub fn add_identity(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.rows != s.cols {
            return Err(Error::Graph("add_identity of non-square".into()));
        }
        let mut out = self.value(x).to_vec();
        for b in 0..s.batch {
            for i in 0..s.rows {
                out[b * s.mat() + i * s.cols + i] += c;
            }
        }
        Ok(self.push(Op::AddIdentity(x), s, out))
    }

    /// `s·I_dim` (batch 1) for a scalar node `s`.
    pub fn scalar_identity(&mut self, s: Var, dim: usize) -> Result<Var> {
        if self.shape(s) != Shape::scalar() {
            return Err(Error::Graph("scalar_identity needs a scalar".into()));
        }
        let v = self.scalar(s);
        let mut out = vec![0.0; dim * dim];
        for i in 0..dim {
            out[i * dim + i] = v;
        }
        Ok(self.push(Op::ScalarIdentity(s), Shape::new(1, dim, dim), out))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != Shape::scalar() {
            return Err(Error::Graph("mul_scalar needs a scalar".into()));
        }
        let c = self.scalar(s);
        let sh = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        Ok(self.push(Op::MulScalar { x, s }, sh, out))
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != Shape::scalar() {
            return Err(Error::Graph("div_scalar needs a scalar".into()));
        }
        let c = self.scalar(s);
        let sh = self.shape(x);
        let out = self.value(x).iter().map(|v| v / c).collect();
        Ok(self.push(Op::DivScalar { x, s }, sh, out))
    }

    /// Inverse of each SPD matrix in the batch; differentiated as `dM = −M dW M`.
    pub fn spd_inverse(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rows != s.cols {
            return Err(Error::Graph("spd_inverse of non-square".into()));
        }
        let n = s.rows;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for b in 0..s.batch {
            spd_inverse_into(
                &xv[b * n * n..(b + 1) * n * n],
                n,
                &mut out[b * n * n..(b + 1) * n * n],
            )?;
        }
        Ok(self.push(Op::SpdInverse(x), s, out))
    }

    /// Assembles `[[a, b], [c, d]]`; `None` blocks are zero. `a` is `p×p`, `d` is `q×q`.
    pub fn block(&mut self, a: Var, b: Option<Var>, c: Option<Var>, d: Var) -> Result<Var> {
        let (sa, sd) = (self.shape(a), self.shape(d));
        let (p, q) = (sa.rows, sd.rows);
        if sa.cols != p || sd.cols != q {
            return Err(Error::Graph("block diagonal entries must be square".into()));
        }
        let mut batch = broadcast_batch(sa, sd)?;
        if let Some(bv) = b {
            let sb = self.shape(bv);
            if sb.rows != p || sb.cols != q {
                return Err(Error::Graph(format!("upper-right block shape {sb:?}")));
            }
            batch = broadcast_batch(Shape::new(batch, 1, 1), sb)?;
        }
        if let Some(cv) = c {
            let sc = self.shape(cv);
            if sc.rows != q || sc.cols != p {
                return Err(Error::Graph(format!("lower-left block shape {sc:?}")));
            }
            batch = broadcast_batch(Shape::new(batch, 1, 1), sc)?;
        }
        let dim = p + q;
        let mut out = vec![0.0; batch * dim * dim];
        let blocks = [Some(a), b, c, Some(d)];
        let offsets = [(0, 0), (0, p), (p, 0), (p, p)];
        for (blk, &(ro, co)) in blocks.iter().zip(&offsets) {
            if let Some(v) = blk {
                let sv = self.shape(*v);
                let vv = self.value(*v);
                for bi in 0..batch {
                    let src = bidx(bi, sv.batch) * sv.mat();
                    for i in 0..sv.rows {
                        for j in 0..sv.cols {
                            out[bi * dim * dim + (ro + i) * dim + co + j] =
                                vv[src + i * sv.cols + j];
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Block { blocks, p }, Shape::new(batch, dim, dim), out))
    }

    /// Per-sample `(1/ξ) Σ_j max(0, −η_jᵀ X η_j)` with `etas` laid out `[B, ξ, d]`.
    pub fn penalty_pd(&mut self, x: Var, etas: Vec<f64>, count: usize) -> Result<Var> {
        let s = self.shape(x);
        let n = s.rows;
        if s.cols != n || etas.len() != s.batch * count * n || count == 0 {
            return Err(Error::Graph(format!(
                "penalty_pd: matrix {s:?}, {} eta values for {count} vectors",
                etas.len()
            )));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; s.batch];
        for b in 0..s.batch {
            let xm = &xv[b * n * n..(b + 1) * n * n];
            let mut acc = 0.0;
            for j in 0..count {
                let eta = &etas[(b * count + j) * n..(b * count + j + 1) * n];
                let q = quad_form(xm, eta);
                if q < 0.0 {
                    acc -= q;
                }
            }
            out[b] = acc / count as f64;
        }
        Ok(self.push(
            Op::PenaltyPd { x, etas, count },
            Shape::new(s.batch, 1, 1),
            out,
        ))
    }

    pub fn frob_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let xv = self.value(x);
        let m = s.mat();
        let out = (0..s.batch)
            .map(|b| {
                xv[b * m..(b + 1) * m]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.push(Op::FrobNorm(x), Shape::new(s.batch, 1, 1), out)
    }

    /// `scale · Σ_b x[b]`, producing a batch-1 node.
    pub fn sum_batch(&mut self, x: Var, scale: f64) -> Var {
        let s = self.shape(x);
        let m = s.mat();
        let xv = self.value(x);
        let mut out = vec![0.0; m];
        for b in 0..s.batch {
            for (o, v) in out.iter_mut().zip(&xv[b * m..(b + 1) * m]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= scale;
        }
        self.push(
            Op::SumBatch { x, scale },
            Shape::new(1, s.rows, s.cols),
            out,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        self.push(Op::SumAll(x), Shape::scalar(), vec![v])
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != Shape::scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        if let Some(node) = self.first_non_finite() {
            if node <= root.0 {
                return Err(Error::NumericOverflow { node });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let s = node.shape;
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::RowsMatmulT { x, w } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (m, k, n) = (xs.batch * xs.rows, xs.cols, ws.rows);
                let xv = self.value(*x);
                let wv = self.value(*w);
                {
                    let gx = acc_buf(grads, *x, xs.len());
                    // SAFETY: dimensions and strides match the buffers.
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            wv.as_ptr(),
                            k as isize,
                            1,
                            1.0,
                            gx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                let gw = acc_buf(grads, *w, ws.len());
                // SAFETY: as above; gYᵀ is read through transposed strides.
                unsafe {
                    matrixmultiply::dgemm(
                        n,
                        m,
                        k,
                        1.0,
                        g.as_ptr(),
                        1,
                        n as isize,
                        xv.as_ptr(),
                        k as isize,
                        1,
                        1.0,
                        gw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }
            Op::AddBiasRow0 { x, b } => {
                add_into(acc_buf(grads, *x, s.len()), g);
                let gb = acc_buf(grads, *b, s.cols);
                for bi in 0..s.batch {
                    for (o, v) in gb.iter_mut().zip(&g[bi * s.mat()..bi * s.mat() + s.cols]) {
                        *o += v;
                    }
                }
            }
            Op::TanhJvp(x) => {
                let xv = self.value(*x);
                let gx = acc_buf(grads, *x, s.len());
                let (r, c) = (s.rows, s.cols);
                for b in 0..s.batch {
                    let base = b * r * c;
                    for j in 0..c {
                        let y0 = y[base + j];
                        let d = 1.0 - y0 * y0;
                        let mut g0 = g[base + j] * d;
                        let dd = -2.0 * y0 * d;
                        for row in 1..r {
                            let k = base + row * c + j;
                            g0 += g[k] * xv[k] * dd;
                            gx[k] += g[k] * d;
                        }
                        gx[base + j] += g0;
                    }
                }
            }
            Op::MulJvp(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, c) = (s.rows, s.cols);
                let mut ga = vec![0.0; s.len()];
                let mut gb = vec![0.0; s.len()];
                for bi in 0..s.batch {
                    let base = bi * r * c;
                    for j in 0..c {
                        let (a0, b0) = (av[base + j], bv[base + j]);
                        ga[base + j] += g[base + j] * b0;
                        gb[base + j] += g[base + j] * a0;
                        for row in 1..r {
                            let k = base + row * c + j;
                            ga[base + j] += g[k] * bv[k];
                            gb[k] += g[k] * a0;
                            ga[k] += g[k] * b0;
                            gb[base + j] += g[k] * av[k];
                        }
                    }
                }
                add_into(acc_buf(grads, *a, s.len()), &ga);
                add_into(acc_buf(grads, *b, s.len()), &gb);
            }
            Op::Reshape(x) => add_into(acc_buf(grads, *x, s.len()), g),
            Op::ConcatRows(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let total = sa.mat() + sb.mat();
                {
                    let ga = acc_buf(grads, *a, sa.len());
                    for bi in 0..s.batch {
                        let dst = bidx(bi, sa.batch) * sa.mat();
                        add_into(
                            &mut ga[dst..dst + sa.mat()],
                            &g[bi * total..bi * total + sa.mat()],
                        );
                    }
                }
                let gb = acc_buf(grads, *b, sb.len());
                for bi in 0..s.batch {
                    let dst = bidx(bi, sb.batch) * sb.mat();
                    add_into(
                        &mut gb[dst..dst + sb.mat()],
                        &g[bi * total + sa.mat()..(bi + 1) * total],
                    );
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let gx = acc_buf(grads, *x, xs.len());
                for b in 0..s.batch {
                    let dst = b * xs.mat() + start * xs.cols;
                    add_into(
                        &mut gx[dst..dst + s.mat()],
                        &g[b * s.mat()..(b + 1) * s.mat()],
                    );
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x);
                let gx = acc_buf(grads, *x, xs.len());
                for b in 0..s.batch {
                    for i in 0..s.rows {
                        let dst = b * xs.mat() + i * xs.cols + start;
                        let src = b * s.mat() + i * s.cols;
                        add_into(&mut gx[dst..dst + s.cols], &g[src..src + s.cols]);
                    }
                }
            }
            Op::Transpose(x) => {
                let gx = acc_buf(grads, *x, s.len());
                for b in 0..s.batch {
                    let base = b * s.mat();
                    for i in 0..s.rows {
                        for j in 0..s.cols {
                            gx[base + j * s.rows + i] += g[base + i * s.cols + j];
                        }
                    }
                }
            }
            Op::BMatmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa.rows, sa.cols, sb.cols);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; sa.len()];
                let mut gb = vec![0.0; sb.len()];
                for bi in 0..s.batch {
                    let ao = bidx(bi, sa.batch) * r * k;
                    let bo = bidx(bi, sb.batch) * k * c;
                    let go = bi * r * c;
                    for i in 0..r {
                        let grow = &g[go + i * c..go + (i + 1) * c];
                        for p in 0..k {
                            let brow = &bv[bo + p * c..bo + (p + 1) * c];
                            let mut acc = 0.0;
                            for (gg, bb) in grow.iter().zip(brow) {
                                acc += gg * bb;
                            }
                            ga[ao + i * k + p] += acc;
                            let aip = av[ao + i * k + p];
                            if aip != 0.0 {
                                let gbrow = &mut gb[bo + p * c..bo + (p + 1) * c];
                                for (o, gg) in gbrow.iter_mut().zip(grow) {
                                    *o += aip * gg;
                                }
                            }
                        }
                    }
                }
                add_into(acc_buf(grads, *a, sa.len()), &ga);
                add_into(acc_buf(grads, *b, sb.len()), &gb);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                reduce_broadcast(grads, *a, self.shape(*a), g, s, 1.0);
                reduce_broadcast(grads, *b, self.shape(*b), g, s, sign);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = s.mat();
                let mut ga = vec![0.0; sa.len()];
                let mut gb = vec![0.0; sb.len()];
                for bi in 0..s.batch {
                    let ao = bidx(bi, sa.batch) * m;
                    let bo = bidx(bi, sb.batch) * m;
                    for k in 0..m {
                        let gg = g[bi * m + k];
                        ga[ao + k] += gg * bv[bo + k];
                        gb[bo + k] += gg * av[ao + k];
                    }
                }
                add_into(acc_buf(grads, *a, sa.len()), &ga);
                add_into(acc_buf(grads, *b, sb.len()), &gb);
            }
            Op::Scale(x, c) => {
                let gx = acc_buf(grads, *x, s.len());
                for (o, gg) in gx.iter_mut().zip(g) {
                    *o += c * gg;
                }
            }
            Op::AddConst(x) => add_into(acc_buf(grads, *x, s.len()), g),
            Op::Square(x) => {
                let xv = self.value(*x);
                let gx = acc_buf(grads, *x, s.len());
                for k in 0..s.len() {
                    gx[k] += 2.0 * xv[k] * g[k];
                }
            }
            Op::Tanh(x) => {
                let gx = acc_buf(grads, *x, s.len());
                for k in 0..s.len() {
                    gx[k] += (1.0 - y[k] * y[k]) * g[k];
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let gx = acc_buf(grads, *x, s.len());
                for k in 0..s.len() {
                    gx[k] += sigmoid(xv[k]) * g[k];
                }
            }
            Op::ScaleRows { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let mut gv = vec![0.0; s.batch * s.rows];
                {
                    let gx = acc_buf(grads, *x, s.len());
                    for b in 0..s.batch {
                        for i in 0..s.rows {
                            let f = vv[b * s.rows + i];
                            let base = b * s.mat() + i * s.cols;
                            let mut acc = 0.0;
                            for j in 0..s.cols {
                                gx[base + j] += f * g[base + j];
                                acc += xv[base + j] * g[base + j];
                            }
                            gv[b * s.rows + i] = acc;
                        }
                    }
                }
                add_into(acc_buf(grads, *v, gv.len()), &gv);
            }
            Op::Sym(x) => {
                let n = s.rows;
                let gx = acc_buf(grads, *x, s.len());
                for b in 0..s.batch {
                    let base = b * n * n;
                    for i in 0..n {
                        for j in 0..n {
                            gx[base + i * n + j] += g[base + i * n + j] + g[base + j * n + i];
                        }
                    }
                }
            }
            Op::AddIdentity(x) => add_into(acc_buf(grads, *x, s.len()), g),
            Op::ScalarIdentity(sv) => {
                let tr: f64 = (0..s.rows).map(|i| g[i * s.cols + i]).sum();
                acc_buf(grads, *sv, 1)[0] += tr;
            }
            Op::MulScalar { x, s: sv } => {
                let c = self.scalar(*sv);
                let xv = self.value(*x);
                let mut dot = 0.0;
                {
                    let gx = acc_buf(grads, *x, s.len());
                    for k in 0..s.len() {
                        gx[k] += c * g[k];
                        dot += xv[k] * g[k];
                    }
                }
                acc_buf(grads, *sv, 1)[0] += dot;
            }
            Op::DivScalar { x, s: sv } => {
                let c = self.scalar(*sv);
                let mut dot = 0.0;
                {
                    let gx = acc_buf(grads, *x, s.len());
                    for k in 0..s.len() {
                        gx[k] += g[k] / c;
                        dot += y[k] * g[k];
                    }
                }
                acc_buf(grads, *sv, 1)[0] -= dot / c;
            }
            Op::SpdInverse(x) => {
                // dL/dW = −Mᵀ G Mᵀ with M symmetric.
                let n = s.rows;
                let gx = acc_buf(grads, *x, s.len());
                let mut tmp = vec![0.0; n * n];
                for b in 0..s.batch {
                    let mm = &y[b * n * n..(b + 1) * n * n];
                    let gg = &g[b * n * n..(b + 1) * n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for k in 0..n {
                                acc += gg[i * n + k] * mm[k * n + j];
                            }
                            tmp[i * n + j] = acc;
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for k in 0..n {
                                acc += mm[i * n + k] * tmp[k * n + j];
                            }
                            gx[b * n * n + i * n + j] -= acc;
                        }
                    }
                }
            }
            Op::Block { blocks, p } => {
                let dim = s.rows;
                let offsets = [(0, 0), (0, *p), (*p, 0), (*p, *p)];
                for (blk, &(ro, co)) in blocks.iter().zip(&offsets) {
                    if let Some(v) = blk {
                        let sv = self.shape(*v);
                        let gv = acc_buf(grads, *v, sv.len());
                        for bi in 0..s.batch {
                            let dst = bidx(bi, sv.batch) * sv.mat();
                            for i in 0..sv.rows {
                                for j in 0..sv.cols {
                                    gv[dst + i * sv.cols + j] +=
                                        g[bi * dim * dim + (ro + i) * dim + co + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::PenaltyPd { x, etas, count } => {
                let xs = self.shape(*x);
                let n = xs.rows;
                let xv = self.value(*x);
                let gx = acc_buf(grads, *x, xs.len());
                for b in 0..xs.batch {
                    let xm = &xv[b * n * n..(b + 1) * n * n];
                    let scale = -g[b] / *count as f64;
                    for j in 0..*count {
                        let eta = &etas[(b * count + j) * n..(b * count + j + 1) * n];
                        if quad_form(xm, eta) < 0.0 {
                            for r in 0..n {
                                for c in 0..n {
                                    gx[b * n * n + r * n + c] += scale * eta[r] * eta[c];
                                }
                            }
                        }
                    }
                }
            }
            Op::FrobNorm(x) => {
                let xs = self.shape(*x);
                let m = xs.mat();
                let xv = self.value(*x);
                let gx = acc_buf(grads, *x, xs.len());
                for b in 0..xs.batch {
                    // Subgradient 0 at the origin.
                    if y[b] > 0.0 {
                        let f = g[b] / y[b];
                        for k in 0..m {
                            gx[b * m + k] += f * xv[b * m + k];
                        }
                    }
                }
            }
            Op::SumBatch { x, scale } => {
                let xs = self.shape(*x);
                let m = xs.mat();
                let gx = acc_buf(grads, *x, xs.len());
                for b in 0..xs.batch {
                    for k in 0..m {
                        gx[b * m + k] += scale * g[k];
                    }
                }
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                let gx = acc_buf(grads, *x, xs.len());
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}

fn acc_buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_broadcast(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    vs: Shape,
    g: &[f64],
    gs: Shape,
    sign: f64,
) {
    let m = gs.mat();
    let gv = acc_buf(grads, v, vs.len());
    for b in 0..gs.batch {
        let dst = bidx(b, vs.batch) * m;
        for k in 0..m {
            gv[dst + k] += sign * g[b * m + k];
        }
    }
}

#[inline]
fn quad_form(x: &[f64], eta: &[f64]) -> f64 {
    let n = eta.len();
    let mut q = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += x[i * n + j] * eta[j];
        }
        q += eta[i] * row;
    }
    q
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
