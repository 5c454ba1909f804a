//! Forward evaluation and vector-Jacobian rules for every recordable kernel.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, sigmoid_scalar, Precision, Tensor, GELU_C};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf { name: Option<String> },
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `x * s` for a one-element tensor `s`.
    ScaleBy,
    Silu,
    Gelu,
    Sigmoid,
    LayerNorm { eps: f64 },
    MeanPool,
    Inject,
    Gather { ids: Arc<Vec<usize>>, batch: usize, len: usize },
    Softmax,
    Attention { heads: usize },
    DiagScan,
    CrossEntropy { targets: Arc<Vec<usize>> },
    Sum,
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy => "scale_by",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool => "mean_pool",
            Op::Inject => "inject",
            Op::Gather { .. } => "gather",
            Op::Softmax => "softmax",
            Op::Attention { .. } => "attention",
            Op::DiagScan => "diag_scan",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    Rstd(Vec<f64>),
    Probs(Tensor),
    States(Tensor),
}

pub(crate) fn eval(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Leaf { .. } => Err(Error::Argument("leaf nodes are not evaluated".into())),
        Op::MatMul => plain(tensor::matmul(x[0], x[1])?),
        Op::Add => plain(tensor::add(x[0], x[1])?),
        Op::Sub => plain(tensor::sub(x[0], x[1])?),
        Op::Mul => plain(tensor::mul(x[0], x[1])?),
        Op::Scale(c) => plain(tensor::scale(x[0], *c)),
        Op::AddScalar(c) => plain(tensor::add_scalar(x[0], *c)),
        Op::ScaleBy => {
            if x[1].len() != 1 {
                return Err(Error::dim("scale_by", format!("scale has shape {:?}", x[1].shape())));
            }
            let s = x[1].data()[0];
            let p = x[0].precision().join(x[1].precision());
            plain(tensor::scale(&x[0].clone().with_precision(p), s))
        }
        Op::Silu => plain(tensor::silu(x[0])),
        Op::Gelu => plain(tensor::gelu(x[0])),
        Op::Sigmoid => plain(tensor::sigmoid(x[0])),
        Op::LayerNorm { eps } => {
            let (y, rstd) = tensor::layer_norm_with_stats(x[0], *eps);
            Ok((y, Saved::Rstd(rstd)))
        }
        Op::MeanPool => plain(tensor::mean_pool(x[0])?),
        Op::Inject => plain(tensor::inject(x[0], x[1])?),
        Op::Gather { ids, batch, len } => plain(tensor::gather(x[0], ids, *batch, *len)?),
        Op::Softmax => plain(tensor::softmax_rows(x[0])),
        Op::Attention { heads } => {
            let (out, probs) = tensor::causal_attention(x[0], x[1], x[2], *heads)?;
            Ok((out, Saved::Probs(probs)))
        }
        Op::DiagScan => {
            let (y, states) = tensor::diag_scan(x[0], x[1], x[2], x[3], x[4])?;
            Ok((y, Saved::States(states)))
        }
        Op::CrossEntropy { targets } => {
            let (loss, probs) = tensor::cross_entropy(x[0], targets)?;
            let p = x[0].precision();
            Ok((Tensor::scalar(loss).with_precision(p), Saved::Probs(probs)))
        }
        Op::Sum => plain(tensor::sum(x[0])),
    }
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let p = a.precision().join(b.precision());
    let data = a.data().iter().zip(b.data()).map(|(&u, &v)| p.round(f(u, v))).collect();
    Tensor::from_parts(a.shape().to_vec(), data, p)
}

fn dot_rounded(a: &[f64], b: &[f64], p: Precision) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| p.round(acc + p.round(x * y)))
}

/// Cotangents for the inputs of one node. `need[i]` is false for inputs that
/// do not lead to any requested leaf; those entries come back as `None`.
pub(crate) fn vjp(
    op: &Op,
    x: &[&Tensor],
    y: &Tensor,
    saved: &Saved,
    g: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let p = g.precision().join(y.precision());
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let out = match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul => {
            let ga = if want(0) {
                Some(tensor::matmul_bt(g, x[1])?.reshape(x[0].shape())?)
            } else {
                None
            };
            let gw = if want(1) { Some(tensor::matmul_at(x[0], g)?) } else { None };
            vec![ga, gw]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| tensor::scale(g, -1.0))],
        Op::Mul => vec![
            want(0).then(|| map2(g, x[1], |a, b| a * b)),
            want(1).then(|| map2(g, x[0], |a, b| a * b)),
        ],
        Op::Scale(c) => vec![Some(tensor::scale(g, *c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::ScaleBy => {
            let s = x[1].data()[0];
            let gx = want(0).then(|| tensor::scale(&g.clone().with_precision(p), s));
            let gs = want(1).then(|| {
                Tensor::from_parts(x[1].shape().to_vec(), vec![dot_rounded(g.data(), x[0].data(), p)], p)
            });
            vec![gx, gs]
        }
        Op::Silu => vec![Some(map2(g, x[0], |gv, xv| {
            let s = sigmoid_scalar(xv);
            gv * s * (1.0 + xv * (1.0 - s))
        }))],
        Op::Gelu => vec![Some(map2(g, x[0], |gv, xv| {
            let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
            gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du)
        }))],
        Op::Sigmoid => vec![Some(map2(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
        Op::LayerNorm { .. } => {
            let Saved::Rstd(rstd) = saved else { unreachable!("layer_norm saves rstd") };
            let d = y.cols();
            let mut gx = vec![0.0; g.len()];
            for (r, ((gr, yr), out)) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                let mean_g = p.round(gr.iter().fold(0.0, |a, &v| p.round(a + v)) / d as f64);
                let mean_gy = p.round(dot_rounded(gr, yr, p) / d as f64);
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = p.round(rstd[r] * p.round(p.round(gv - mean_g) - p.round(yv * mean_gy)));
                }
            }
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), gx, p))]
        }
        Op::MeanPool => {
            let shape = x[0].shape();
            let (l, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let mut gx = Vec::with_capacity(x[0].len());
            for gr in g.data().chunks(d) {
                for _ in 0..l {
                    gx.extend(gr.iter().map(|&v| p.round(v / l as f64)));
                }
            }
            vec![Some(Tensor::from_parts(shape.to_vec(), gx, p))]
        }
        Op::Inject => {
            let s = x[0].shape();
            let (b, l, d) = (s[0], s[1], s[2]);
            let gv = want(1).then(|| {
                let mut acc = vec![0.0; b * d];
                for bi in 0..b {
                    let o = &mut acc[bi * d..(bi + 1) * d];
                    for li in 0..l {
                        let gr = &g.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                        for (a, &v) in o.iter_mut().zip(gr) {
                            *a = p.round(*a + v);
                        }
                    }
                }
                Tensor::from_parts(vec![b, d], acc, p)
            });
            vec![want(0).then(|| g.clone()), gv]
        }
        Op::Gather { ids, .. } => {
            let (v, d) = (x[0].shape()[0], x[0].shape()[1]);
            let mut gt = vec![0.0; v * d];
            for (row, &id) in ids.iter().enumerate() {
                let gr = &g.data()[row * d..(row + 1) * d];
                for (a, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                    *a = p.round(*a + gv);
                }
            }
            vec![Some(Tensor::from_parts(vec![v, d], gt, p))]
        }
        Op::Softmax => {
            let d = y.cols();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let s = dot_rounded(gr, yr, p);
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = p.round(yv * p.round(gv - s));
                }
            }
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), gx, p))]
        }
        Op::Attention { heads } => {
            let Saved::Probs(probs) = saved else { unreachable!("attention saves probs") };
            let (gq, gk, gv) = attention_vjp(x[0], x[1], x[2], probs, g, *heads, p);
            vec![want(0).then_some(gq), want(1).then_some(gk), want(2).then_some(gv)]
        }
        Op::DiagScan => {
            let Saved::States(states) = saved else { unreachable!("diag_scan saves states") };
            diag_scan_vjp(x, states, g, p, need)
        }
        Op::CrossEntropy { targets } => {
            let Saved::Probs(probs) = saved else { unreachable!("cross_entropy saves probs") };
            let v = probs.cols();
            let rows = probs.rows() as f64;
            let gs = g.data()[0];
            let mut gl = probs.data().to_vec();
            for (row, &t) in gl.chunks_mut(v).zip(targets.iter()) {
                row[t] -= 1.0;
                for e in row.iter_mut() {
                    *e = p.round(p.round(*e * gs) / rows);
                }
            }
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), gl, p))]
        }
        Op::Sum => {
            let gs = g.data()[0];
            vec![Some(Tensor::from_parts(x[0].shape().to_vec(), vec![gs; x[0].len()], p))]
        }
    };
    Ok(out)
}

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    g: &Tensor,
    heads: usize,
    p: Precision,
) -> (Tensor, Tensor, Tensor) {
    let s = q.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; l];
    let at = |bi: usize, i: usize, h: usize| (bi * l + i) * d + h * dh;
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let prow = &probs.data()[((bi * heads + h) * l + i) * l..][..=i];
                let gi = &g.data()[at(bi, i, h)..at(bi, i, h) + dh];
                for (j, dpj) in dp[..=i].iter_mut().enumerate() {
                    let vj = &v.data()[at(bi, j, h)..at(bi, j, h) + dh];
                    *dpj = dot_rounded(gi, vj, p);
                }
                let row_dot = dot_rounded(&dp[..=i], prow, p);
                for (j, &pij) in prow.iter().enumerate() {
                    let ds = p.round(p.round(pij * p.round(dp[j] - row_dot)) * scale);
                    for e in 0..dh {
                        let qi = at(bi, i, h) + e;
                        let kj = at(bi, j, h) + e;
                        gq[qi] = p.round(gq[qi] + p.round(ds * k.data()[kj]));
                        gk[kj] = p.round(gk[kj] + p.round(ds * q.data()[qi]));
                        gv[kj] = p.round(gv[kj] + p.round(pij * gi[e]));
                    }
                }
            }
        }
    }
    let mk = |data| Tensor::from_parts(s.to_vec(), data, p);
    (mk(gq), mk(gk), mk(gv))
}

fn diag_scan_vjp(
    x: &[&Tensor],
    states: &Tensor,
    g: &Tensor,
    p: Precision,
    need: &[bool],
) -> Vec<Option<Tensor>> {
    let (u, gate, b_in, c_out, decay) = (x[0], x[1], x[2], x[3], x[4]);
    let s = u.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let n = decay.cols();
    let st = states.data();
    let mut gu = vec![0.0; u.len()];
    let mut gg = vec![0.0; gate.len()];
    let mut gb = vec![0.0; b_in.len()];
    let mut gc = vec![0.0; c_out.len()];
    let mut gdecay = vec![0.0; decay.len()];
    // adjoint of s_t, carried backwards in time
    let mut ds = vec![0.0; d * n];
    for bi in 0..b {
        ds.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..l).rev() {
            let row = bi * l + t;
            let ct = &c_out.data()[row * n..(row + 1) * n];
            let bt = &b_in.data()[row * n..(row + 1) * n];
            for di in 0..d {
                let gy = g.data()[row * d + di];
                let gt = gate.data()[row * d + di];
                let uv = u.data()[row * d + di];
                let mut acc_u = 0.0;
                let mut acc_g = 0.0;
                for ni in 0..n {
                    let sidx = (row * d + di) * n + ni;
                    let k = di * n + ni;
                    // ds already holds the carry from t+1
                    let dsv = p.round(ds[k] + p.round(ct[ni] * gy));
                    gc[row * n + ni] = p.round(gc[row * n + ni] + p.round(gy * st[sidx]));
                    gb[row * n + ni] = p.round(gb[row * n + ni] + p.round(dsv * uv));
                    acc_u = p.round(acc_u + p.round(dsv * bt[ni]));
                    let prev = if t == 0 { 0.0 } else { st[sidx - d * n] };
                    let dcarry = p.round(dsv * prev);
                    acc_g = p.round(acc_g + p.round(dcarry * decay.data()[k]));
                    gdecay[k] = p.round(gdecay[k] + p.round(dcarry * gt));
                    ds[k] = p.round(p.round(decay.data()[k] * gt) * dsv);
                }
                gu[row * d + di] = acc_u;
                gg[row * d + di] = acc_g;
            }
        }
    }
    let mk = |t: &Tensor, data| Some(Tensor::from_parts(t.shape().to_vec(), data, p));
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    vec![
        if want(0) { mk(u, gu) } else { None },
        if want(1) { mk(gate, gg) } else { None },
        if want(2) { mk(b_in, gb) } else { None },
        if want(3) { mk(c_out, gc) } else { None },
        if want(4) { mk(decay, gdecay) } else { None },
    ]
}
