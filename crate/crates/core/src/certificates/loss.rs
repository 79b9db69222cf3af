//! Batched training loss on the differentiation tape.
//!
//! The batch is split into shards. Each shard records its own graph, with the
//! state Jacobians of the networks carried as dual rows, and runs one reverse
//! sweep. Shard results are reduced in shard order, so the gradient does not
//! depend on how many workers evaluated them.

use rayon::prelude::*;

use super::{certificate_matrices, SamplePoint};
use crate::autodiff::{sigmoid, Graph, Shape, Var};
use crate::certnets::{CertificateCheckpoint, Mlp2, MlpVars};
use crate::error::{invalid, Error, Result};
use crate::numerics::{penalty_pd, sample_unit_vectors_stream, UnitVectorSet, XI_TRAIN};
use crate::systems::{ControlAffineSystem, OutputSelector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Unit vectors per matrix.
    pub xi: usize,
    pub etas_seed: u64,
    /// Samples per recorded graph.
    pub shard_size: usize,
    /// Reuse one set of unit vectors for every sample of the batch.
    pub shared_etas: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            xi: XI_TRAIN,
            etas_seed: 0,
            shard_size: 128,
            shared_etas: false,
        }
    }
}

/// Batch means of the four penalty terms plus `α`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub risk_c1: f64,
    pub risk_c2: f64,
    pub risk_c3: f64,
    pub risk_c4: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Loss together with its gradient over `θ_w, θ_u1, θ_u2` (flat order) and the raw gains.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub theta: Vec<f64>,
    pub raw_a: f64,
    pub raw_b: f64,
}

const ID_C1: u64 = 0;
const ID_C2: u64 = 1;
const ID_C3: u64 = 2;

/// Unit vectors for matrix `id` of the sample with global index `index`.
pub fn sample_etas(dim: usize, opts: &LossOptions, index: usize, id: u64) -> Result<UnitVectorSet> {
    let stream = if opts.shared_etas {
        id
    } else {
        ((index as u64) << 2) | id
    };
    sample_unit_vectors_stream(dim, opts.xi, opts.etas_seed, stream)
}

fn check_batch(
    sys: &ControlAffineSystem,
    sel: &OutputSelector,
    batch: &[SamplePoint],
    opts: &LossOptions,
) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("loss needs a nonempty batch"));
    }
    if opts.xi == 0 || opts.shard_size == 0 {
        return Err(invalid("xi and shard size must be positive"));
    }
    if sel.c.ncols() != sys.n() || sel.d.ncols() != sys.m() {
        return Err(invalid("selector dimensions do not match the system"));
    }
    batch.iter().try_for_each(|s| s.check(sys))
}

/// Loss evaluated one sample at a time with dense matrices.
pub fn total_loss(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    batch: &[SamplePoint],
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    check_batch(sys, sel, batch, opts)?;
    let terms: Vec<[f64; 4]> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mats = certificate_matrices(sys, ck, sel, s)?;
            let e1 = sample_etas(mats.c1.dim(), opts, i, ID_C1)?;
            let e2 = sample_etas(mats.c2.dim(), opts, i, ID_C2)?;
            let mut t = [
                penalty_pd(&mats.c1.neg(), &e1)?,
                penalty_pd(&mats.c2, &e2)?,
                0.0,
                0.0,
            ];
            if let Some(c3) = &mats.c3 {
                let e3 = sample_etas(c3.dim(), opts, i, ID_C3)?;
                t[2] = penalty_pd(&c3.neg(), &e3)?;
                t[3] = mats.c4.iter().map(|c| c.frobenius_norm()).sum();
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample { sample: i });
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 4];
    for t in &terms {
        for (s, v) in sums.iter_mut().zip(t) {
            *s += v;
        }
    }
    let nb = batch.len() as f64;
    let alpha = ck.gains.alpha();
    let r = sums.map(|s| s / nb);
    Ok(LossBreakdown {
        risk_c1: r[0],
        risk_c2: r[1],
        risk_c3: r[2],
        risk_c4: r[3],
        alpha,
        total: r.iter().sum::<f64>() + alpha,
    })
}

/// Loss and gradient through the recorded graph.
pub fn loss_and_gradient(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    batch: &[SamplePoint],
    opts: &LossOptions,
) -> Result<LossGradient> {
    check_batch(sys, sel, batch, opts)?;
    let n_total = batch.len();
    let shards: Vec<(usize, &[SamplePoint])> = batch
        .chunks(opts.shard_size)
        .enumerate()
        .map(|(k, c)| (k * opts.shard_size, c))
        .collect();
    let results: Vec<ShardResult> = shards
        .par_iter()
        .map(|(offset, samples)| shard_gradient(sys, ck, sel, samples, *offset, n_total, opts))
        .collect::<Result<_>>()?;

    let mut theta = vec![0.0; ck.flat_theta().len()];
    let (mut raw_a, mut raw_b) = (sigmoid(ck.gains.raw_a), sigmoid(ck.gains.raw_b));
    let mut sums = [0.0; 4];
    for r in &results {
        for (t, g) in theta.iter_mut().zip(&r.theta) {
            *t += g;
        }
        raw_a += r.raw_a;
        raw_b += r.raw_b;
        for (s, v) in sums.iter_mut().zip(&r.sums) {
            *s += v;
        }
    }
    let nb = n_total as f64;
    let alpha = ck.gains.alpha();
    let r = sums.map(|s| s / nb);
    Ok(LossGradient {
        breakdown: LossBreakdown {
            risk_c1: r[0],
            risk_c2: r[1],
            risk_c3: r[2],
            risk_c4: r[3],
            alpha,
            total: r.iter().sum::<f64>() + alpha,
        },
        theta,
        raw_a,
        raw_b,
    })
}

struct ShardResult {
    sums: [f64; 4],
    theta: Vec<f64>,
    raw_a: f64,
    raw_b: f64,
}

/// Stacks per-sample matrices into one constant, or a batch-1 constant when `shared`.
fn stacked(
    g: &mut Graph,
    rows: usize,
    cols: usize,
    shared: bool,
    mut each: impl FnMut(usize, &mut Vec<f64>),
    count: usize,
) -> Result<Var> {
    let batch = if shared { 1 } else { count };
    let mut v = Vec::with_capacity(batch * rows * cols);
    for b in 0..batch {
        each(b, &mut v);
    }
    g.constant(Shape::new(batch, rows, cols), v)
}

fn push_row_major(m: &nalgebra::DMatrix<f64>, out: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

struct Nets {
    metric: MlpVars,
    phi1: MlpVars,
    phi2: MlpVars,
    raw_a: Var,
    raw_b: Var,
}

fn shard_gradient(
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    samples: &[SamplePoint],
    offset: usize,
    n_total: usize,
    opts: &LossOptions,
) -> Result<ShardResult> {
    let mut g = Graph::new();
    let nets = Nets {
        metric: ck.metric.net.graph_vars(&mut g),
        phi1: ck.controller.phi1.graph_vars(&mut g),
        phi2: ck.controller.phi2.graph_vars(&mut g),
        raw_a: g.scalar_param(ck.gains.raw_a),
        raw_b: g.scalar_param(ck.gains.raw_b),
    };
    let terms = record_shard(&mut g, sys, ck, sel, &nets, samples, offset, opts)?;
    let mut per_sample = terms[0];
    for t in &terms[1..] {
        per_sample = g.add(per_sample, *t)?;
    }
    let root = g.sum_batch(per_sample, 1.0 / n_total as f64);
    let root = g.sum_all(root);
    let grads = g.backward(root)?;

    let mut theta = Vec::with_capacity(ck.flat_theta().len());
    for (net, vars) in [
        (&ck.metric.net, &nets.metric),
        (&ck.controller.phi1, &nets.phi1),
        (&ck.controller.phi2, &nets.phi2),
    ] {
        let mut flat = vec![0.0; net.params().len()];
        for (name, var) in ["w1", "b1", "w2", "b2"].iter().zip(vars.as_array()) {
            let slot = net.params().slot(name).expect("network layout");
            flat[slot.range()].copy_from_slice(&grads.get_or_zeros(var, slot.len()));
        }
        theta.extend(flat);
    }
    let sums = terms.map(|t| g.value(t).iter().sum::<f64>());
    Ok(ShardResult {
        sums,
        theta,
        raw_a: grads.get_or_zeros(nets.raw_a, 1)[0],
        raw_b: grads.get_or_zeros(nets.raw_b, 1)[0],
    })
}

/// Records the four per-sample penalty terms, each of shape `[B, 1, 1]`.
#[allow(clippy::too_many_arguments)]
fn record_shard(
    g: &mut Graph,
    sys: &ControlAffineSystem,
    ck: &CertificateCheckpoint,
    sel: &OutputSelector,
    nets: &Nets,
    samples: &[SamplePoint],
    offset: usize,
    opts: &LossOptions,
) -> Result<[Var; 4]> {
    let (n, m, l) = (sys.n(), sys.m(), sys.l());
    let c = ck.controller.inner_width();
    let bsz = samples.len();
    let lambda = ck.hyper.lambda;
    let lins = samples
        .iter()
        .map(|s| sys.linearize(&s.x))
        .collect::<Result<Vec<_>>>()?;
    let const_b = sys.has_constant_b();
    let const_bw = sys.has_constant_bw();

    // Metric with state tangents.
    let inputs = ck.metric.inputs();
    let ni = inputs.len();
    let xin = stacked(
        g,
        1 + n,
        ni,
        false,
        |b, v| {
            v.extend(inputs.iter().map(|&i| samples[b].x[i]));
            for k in 0..n {
                v.extend(inputs.iter().map(|&i| if i == k { 1.0 } else { 0.0 }));
            }
        },
        bsz,
    )?;
    let wout = Mlp2::graph_apply(g, &nets.metric, xin)?;
    let c0 = g.slice_rows(wout, 0, 1)?;
    let cm = g.reshape(c0, n, n)?;
    let dcs = g.slice_rows(wout, 1, n)?;
    let ct = g.transpose(cm);
    let cct = g.bmatmul(cm, ct)?;
    let w = g.add_identity(cct, ck.metric.w_floor)?;
    let mm = g.spd_inverse(w)?;
    // ∂_v W = ⟨(∂_v C) Cᵀ⟩ for a direction `v` of shape [B, 1, n].
    let dir_w = |g: &mut Graph, v: Var| -> Result<Var> {
        let d = g.bmatmul(v, dcs)?;
        let d = g.reshape(d, n, n)?;
        let d = g.bmatmul(d, ct)?;
        g.sym(d)
    };

    // Controller with state tangents.
    let inputs = ck.controller.inputs();
    let ni = inputs.len();
    let uin = stacked(
        g,
        1 + n,
        2 * ni,
        false,
        |b, v| {
            v.extend(inputs.iter().map(|&i| samples[b].x[i]));
            v.extend(inputs.iter().map(|&i| samples[b].x_star[i]));
            for k in 0..n {
                v.extend(inputs.iter().map(|&i| if i == k { 1.0 } else { 0.0 }));
                v.extend(std::iter::repeat_n(0.0, ni));
            }
        },
        bsz,
    )?;
    let err = stacked(
        g,
        n,
        1,
        false,
        |b, v| {
            v.extend(
                samples[b]
                    .x
                    .iter()
                    .zip(&samples[b].x_star)
                    .map(|(a, s)| a - s),
            );
        },
        bsz,
    )?;
    let p1 = Mlp2::graph_apply(g, &nets.phi1, uin)?;
    let p1r = g.reshape(p1, (1 + n) * c, n)?;
    let g1 = g.bmatmul(p1r, err)?;
    let g1 = g.reshape(g1, 1 + n, c)?;
    let p1_0 = g.slice_rows(p1, 0, 1)?;
    let p1_0 = g.reshape(p1_0, c, n)?;
    let p1t = g.transpose(p1_0);
    let zero_row = g.constant(Shape::new(1, 1, c), vec![0.0; c])?;
    let extra = g.concat_rows(zero_row, p1t)?;
    let vd = g.add(g1, extra)?;
    let sd = g.tanh_jvp(vd);
    let s_row = g.slice_rows(sd, 0, 1)?;
    let s_col = g.transpose(s_row);
    let ds = g.slice_rows(sd, 1, n)?;
    let p2 = Mlp2::graph_apply(g, &nets.phi2, uin)?;
    let p2r = g.reshape(p2, (1 + n) * m, c)?;
    let g2 = g.bmatmul(p2r, s_col)?;
    let g2 = g.reshape(g2, 1 + n, m)?;
    let phi2 = g.slice_rows(p2, 0, 1)?;
    let phi2 = g.reshape(phi2, m, c)?;
    let phi2t = g.transpose(phi2);
    let kt_a = g.slice_rows(g2, 1, n)?;
    let kt_b = g.bmatmul(ds, phi2t)?;
    let kt = g.add(kt_a, kt_b)?;
    let kmat = g.transpose(kt);
    let kvec = g.slice_rows(g2, 0, 1)?;
    let ustar = stacked(g, 1, m, false, |b, v| v.extend(&samples[b].u_star), bsz)?;
    let u = g.add(kvec, ustar)?;

    // Closed loop.
    let bmat = stacked(g, n, m, const_b, |b, v| push_row_major(&lins[b].b, v), bsz)?;
    let bt = g.transpose(bmat);
    let fw = stacked(
        g,
        1,
        n,
        false,
        |b, v| {
            let lin = &lins[b];
            let d = &lin.f + &lin.bw * nalgebra::DVector::from_column_slice(&samples[b].w);
            v.extend(d.iter());
        },
        bsz,
    )?;
    let bu = g.bmatmul(u, bt)?;
    let xdot = g.add(bu, fw)?;
    let wdot = dir_w(g, xdot)?;
    let mw = g.bmatmul(mm, wdot)?;
    let mwm = g.bmatmul(mw, mm)?;
    let mdot = g.neg(mwm);
    let a0 = stacked(
        g,
        n,
        n,
        false,
        |b, v| {
            let mut a = lins[b].jac_f.clone();
            for (jw, wi) in lins[b].jac_bw.iter().zip(&samples[b].w) {
                a += jw * *wi;
            }
            push_row_major(&a, v)
        },
        bsz,
    )?;
    let jbs = if const_b {
        None
    } else {
        Some(stacked(
            g,
            m,
            n * n,
            false,
            |b, v| {
                for jb in &lins[b].jac_b {
                    push_row_major(jb, v);
                }
            },
            bsz,
        )?)
    };
    let a = match jbs {
        Some(jbs) => {
            let au = g.bmatmul(u, jbs)?;
            let au = g.reshape(au, n, n)?;
            g.add(a0, au)?
        }
        None => a0,
    };
    let bk = g.bmatmul(bmat, kmat)?;
    let acl = g.add(a, bk)?;
    let ma = g.bmatmul(mm, acl)?;
    let tl = g.sym(ma)?;
    let tl = g.add(tl, mdot)?;
    let lm = g.scale(mm, lambda);
    let tl = g.add(tl, lm)?;
    let bw = stacked(
        g,
        n,
        l,
        const_bw,
        |b, v| push_row_major(&lins[b].bw, v),
        bsz,
    )?;
    let mbw = g.bmatmul(mm, bw)?;
    let mbwt = g.transpose(mbw);
    let mu = g.softplus(nets.raw_a);
    let mu_i = g.scalar_identity(mu, l)?;
    let neg_mu_i = g.neg(mu_i);
    let c1 = g.block(tl, Some(mbw), Some(mbwt), neg_mu_i)?;
    let neg_c1 = g.neg(c1);
    let etas1 = etas_for(samples, offset, n + l, ID_C1, opts)?;
    let pen1 = g.penalty_pd(neg_c1, etas1, opts.xi)?;

    // Output gain.
    let p = sel.rows();
    let csel = g.constant(
        Shape::new(1, p, n),
        sel.c.transpose().iter().copied().collect(),
    )?;
    let calc = if sel.has_feedthrough() {
        let dsel = g.constant(
            Shape::new(1, p, m),
            sel.d.transpose().iter().copied().collect(),
        )?;
        let dk = g.bmatmul(dsel, kmat)?;
        g.add(csel, dk)?
    } else {
        csel
    };
    let calct = g.transpose(calc);
    let ctc = g.bmatmul(calct, calc)?;
    let gap = g.softplus(nets.raw_b);
    let alpha = g.add(mu, gap)?;
    let ctc_a = g.div_scalar(ctc, alpha)?;
    let tl2 = g.sub(lm, ctc_a)?;
    let br = g.scalar_identity(gap, l)?;
    let c2 = g.block(tl2, None, None, br)?;
    let etas2 = etas_for(samples, offset, n + l, ID_C2, opts)?;
    let pen2 = g.penalty_pd(c2, etas2, opts.xi)?;

    // Unactuated directions.
    let bps = if const_b {
        match sys.b_perp(&samples[0].x) {
            Ok(bp) => Some(vec![bp]),
            Err(Error::EmptyAnnihilator) => None,
            Err(e) => return Err(e),
        }
    } else {
        match samples
            .iter()
            .map(|s| sys.b_perp(&s.x))
            .collect::<Result<Vec<_>>>()
        {
            Ok(v) => Some(v),
            Err(Error::EmptyAnnihilator) => None,
            Err(e) => return Err(e),
        }
    };
    let zeros = g.constant(Shape::new(bsz, 1, 1), vec![0.0; bsz])?;
    let Some(bps) = bps else {
        return Ok([pen1, pen2, zeros, zeros]);
    };
    let r = bps[0].ncols();
    if bps.iter().any(|bp| bp.ncols() != r) {
        return Err(Error::Graph(
            "annihilator rank changes within a shard".into(),
        ));
    }
    let bp = stacked(g, n, r, const_b, |b, v| push_row_major(&bps[b], v), bsz)?;
    let bpt = g.transpose(bp);
    let sandwich = |g: &mut Graph, x: Var| -> Result<Var> {
        let y = g.bmatmul(bpt, x)?;
        g.bmatmul(y, bp)
    };
    let fr = stacked(g, 1, n, false, |b, v| v.extend(lins[b].f.iter()), bsz)?;
    let dfw = dir_w(g, fr)?;
    let dfw = g.scale(dfw, ck.hyper.lie_sign.factor());
    let jf = stacked(
        g,
        n,
        n,
        false,
        |b, v| push_row_major(&lins[b].jac_f, v),
        bsz,
    )?;
    let jfw = g.bmatmul(jf, w)?;
    let jfw = g.sym(jfw)?;
    let w2l = g.scale(w, 2.0 * lambda);
    let inner = g.add(dfw, jfw)?;
    let inner = g.add(inner, w2l)?;
    let c3 = sandwich(g, inner)?;
    let neg_c3 = g.neg(c3);
    let etas3 = etas_for(samples, offset, r, ID_C3, opts)?;
    let pen3 = g.penalty_pd(neg_c3, etas3, opts.xi)?;

    let dcb = g.bmatmul(bt, dcs)?;
    let mut pen4 = zeros;
    for j in 0..m {
        let dcj = g.slice_rows(dcb, j, 1)?;
        let dcj = g.reshape(dcj, n, n)?;
        let dwj = g.bmatmul(dcj, ct)?;
        let mut inner = g.sym(dwj)?;
        if !const_b {
            let jb = stacked(
                g,
                n,
                n,
                false,
                |b, v| push_row_major(&lins[b].jac_b[j], v),
                bsz,
            )?;
            let jbw = g.bmatmul(jb, w)?;
            let jbw = g.sym(jbw)?;
            inner = g.sub(inner, jbw)?;
        }
        let c4 = sandwich(g, inner)?;
        let fro = g.frob_norm(c4);
        pen4 = g.add(pen4, fro)?;
    }
    Ok([pen1, pen2, pen3, pen4])
}

fn etas_for(
    samples: &[SamplePoint],
    offset: usize,
    dim: usize,
    id: u64,
    opts: &LossOptions,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len() * opts.xi * dim);
    for i in 0..samples.len() {
        out.extend_from_slice(sample_etas(dim, opts, offset + i, id)?.as_slice());
    }
    Ok(out)
}
