use rayon::prelude::*;

use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds a matmul runs on the calling thread.
const PAR_MIN_WORK: usize = 1 << 18;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Row-major `[m, k] x [k, n]` product with each output entry accumulated
/// left to right over `k`, starting from `0.0`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, p: Precision) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let row_kernel = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        match p {
            Precision::F64 => {
                for (t, &av) in arow.iter().enumerate() {
                    let brow = &b[t * n..(t + 1) * n];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            Precision::F32 => {
                for (t, &av) in arow.iter().enumerate() {
                    let brow = &b[t * n..(t + 1) * n];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv = p.round(*cv + p.round(av * bv));
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        c.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        c.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    c
}

/// `a[..., k] x b[k, n] -> [..., n]`. Leading axes of `a` are treated as rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape().len() != 2 || a.shape().is_empty() {
        return Err(Error::dim(
            "matmul",
            format!("expected [..., k] x [k, n], got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    if a.cols() != k {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let p = a.precision().join(b.precision());
    let m = a.rows();
    let data = gemm(a.data(), b.data(), m, k, n, p);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, data, p))
}

/// `a x b^T` for 2-D-as-rows `a[..., k]` and `b[n, k]`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, &b.transpose()?)
}

/// `a^T x b` where both are viewed as `[rows, cols]` matrices sharing rows.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::dim("matmul_at", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let a2 = a.reshape(&[a.rows(), a.cols()])?.transpose()?;
    let b2 = b.reshape(&[b.rows(), b.cols()])?;
    matmul(&a2, &b2)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let p = x.precision();
    let data = x.data().iter().map(|&v| p.round(f(v))).collect();
    Tensor::from_parts(x.shape().to_vec(), data, p)
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let p = a.precision().join(b.precision());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| p.round(f(x, y))).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data, p))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("mul", a, b, |x, y| x * y)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x + s)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x * s)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, silu_scalar)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

/// Sum of all elements, left to right.
pub fn sum(x: &Tensor) -> Tensor {
    let p = x.precision();
    let s = x.data().iter().fold(0.0, |acc, &v| p.round(acc + v));
    Tensor::from_parts(vec![1], vec![s], p)
}

/// Per-row normalisation over the last axis with population variance and
/// no affine parameters. Also returns the per-row reciprocal std.
pub fn layer_norm_with_stats(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let p = x.precision();
    let d = x.cols();
    let mut out = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(x.rows());
    for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = p.round(xr.iter().fold(0.0, |a, &v| p.round(a + v)) / d as f64);
        let var = p.round(
            xr.iter().fold(0.0, |a, &v| {
                let c = p.round(v - mean);
                p.round(a + p.round(c * c))
            }) / d as f64,
        );
        let rstd = p.round(1.0 / (var + eps).sqrt());
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = p.round(p.round(v - mean) * rstd);
        }
        rstds.push(rstd);
    }
    (Tensor::from_parts(x.shape().to_vec(), out, p), rstds)
}

pub fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    layer_norm_with_stats(x, eps).0
}

/// Mean over the second-to-last axis: `[..., L, D] -> [..., D]`.
/// A 1-row input `[L, D]` pools to `[D]`.
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim("mean_pool", format!("expected [.., L, D], got {shape:?}")));
    }
    let (l, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if l == 0 {
        return Err(Error::EmptyInput("mean_pool"));
    }
    let p = x.precision();
    let groups = x.len() / (l * d);
    let mut out = vec![0.0; groups * d];
    for (g, o) in out.chunks_mut(d).enumerate() {
        let block = &x.data()[g * l * d..(g + 1) * l * d];
        for row in block.chunks(d) {
            for (acc, &v) in o.iter_mut().zip(row) {
                *acc = p.round(*acc + v);
            }
        }
        for v in o.iter_mut() {
            *v = p.round(*v / l as f64);
        }
    }
    let out_shape = shape[..shape.len() - 2].iter().copied().chain([d]).collect();
    Ok(Tensor::from_parts(out_shape, out, p))
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let p = x.precision();
    let d = x.cols();
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        softmax_into(xr, yr, p);
    }
    Tensor::from_parts(x.shape().to_vec(), out, p)
}

fn softmax_into(xr: &[f64], yr: &mut [f64], p: Precision) {
    let mx = xr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for (y, &v) in yr.iter_mut().zip(xr) {
        *y = p.round((v - mx).exp());
        total = p.round(total + *y);
    }
    for y in yr.iter_mut() {
        *y = p.round(*y / total);
    }
}

/// Adds a per-sequence vector to every position: `canvas[B, L, D] + v[B, D]`.
pub fn inject(canvas: &Tensor, v: &Tensor) -> Result<Tensor> {
    let cs = canvas.shape();
    if cs.len() != 3 || v.shape() != [cs[0], cs[2]] {
        return Err(Error::dim("inject", format!("{:?} + {:?}", cs, v.shape())));
    }
    let (b, l, d) = (cs[0], cs[1], cs[2]);
    let p = canvas.precision().join(v.precision());
    let mut out = canvas.data().to_vec();
    for bi in 0..b {
        let vr = &v.data()[bi * d..(bi + 1) * d];
        for li in 0..l {
            let row = &mut out[(bi * l + li) * d..(bi * l + li + 1) * d];
            for (o, &x) in row.iter_mut().zip(vr) {
                *o = p.round(*o + x);
            }
        }
    }
    Ok(Tensor::from_parts(cs.to_vec(), out, p))
}

/// Embedding lookup: `table[V, D]`, ids shaped `[B, L]` -> `[B, L, D]`.
pub fn gather(table: &Tensor, ids: &[usize], batch: usize, len: usize) -> Result<Tensor> {
    if table.shape().len() != 2 || ids.len() != batch * len {
        return Err(Error::dim("gather", format!("table {:?}, {} ids", table.shape(), ids.len())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Argument(format!("token id {id} out of range for vocab {v}")));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![batch, len, d], out, table.precision()))
}

/// Mean token cross-entropy of `logits[..., V]` against `targets`, plus the
/// row softmax used by the backward rule.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let v = logits.cols();
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::dim("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
    }
    if rows == 0 {
        return Err(Error::EmptyInput("cross_entropy"));
    }
    let p = logits.precision();
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for (i, (row, &t)) in logits.data().chunks(v).zip(targets).enumerate() {
        if t >= v {
            return Err(Error::Argument(format!("target {t} at row {i} out of range")));
        }
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = p.round(mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln());
        total = p.round(total + p.round(lse - row[t]));
    }
    Ok((p.round(total / rows as f64), probs))
}

/// Index of the row maximum (first on ties). Forward-only.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    x.data()
        .chunks(x.cols().max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn attention_dims(q: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::dim("attention", format!("shape {s:?} with {heads} heads")));
    }
    Ok((s[0], s[1], s[2], s[2] / heads))
}

/// Causal attention probabilities `[B, H, L, L]`, zero above the diagonal.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    same_shape("attention", q, k)?;
    let (b, l, d, dh) = attention_dims(q, heads)?;
    let p = q.precision().join(k.precision());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; b * heads * l * l];
    let mut scores = vec![0.0; l];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let qi = &q.data()[(bi * l + i) * d + h * dh..(bi * l + i) * d + (h + 1) * dh];
                for (j, s) in scores[..=i].iter_mut().enumerate() {
                    let kj = &k.data()[(bi * l + j) * d + h * dh..(bi * l + j) * d + (h + 1) * dh];
                    let dot = qi.iter().zip(kj).fold(0.0, |a, (&x, &y)| p.round(a + p.round(x * y)));
                    *s = p.round(dot * scale);
                }
                let base = ((bi * heads + h) * l + i) * l;
                softmax_into(&scores[..=i], &mut probs[base..base + i + 1], p);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, heads, l, l], probs, p))
}

/// Multi-head causal attention over `[B, L, D]` projections. Returns the
/// merged head outputs `[B, L, D]` and the probabilities.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    same_shape("attention", q, v)?;
    let probs = attention_probs(q, k, heads)?;
    let (b, l, d, dh) = attention_dims(q, heads)?;
    let p = probs.precision().join(v.precision());
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let prow = &probs.data()[((bi * heads + h) * l + i) * l..][..=i];
                let orow = &mut out[(bi * l + i) * d + h * dh..(bi * l + i) * d + (h + 1) * dh];
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &v.data()[(bi * l + j) * d + h * dh..(bi * l + j) * d + (h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = p.round(*o + p.round(pij * x));
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, l, d], out, p), probs))
}

/// Diagonal gated linear recurrence with `N` states per channel:
///
/// `s_t[d, n] = decay[d, n] * gate_t[d] * s_{t-1}[d, n] + b_t[n] * u_t[d]`,
/// `y_t[d] = sum_n c_t[n] * s_t[d, n]`, with `s_{-1} = 0`.
///
/// Inputs: `u, gate: [B, L, D]`, `b_in, c_out: [B, L, N]`, `decay: [D, N]`.
/// Returns `y: [B, L, D]` and all states `[B, L, D, N]`.
pub fn diag_scan(
    u: &Tensor,
    gate: &Tensor,
    b_in: &Tensor,
    c_out: &Tensor,
    decay: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let s = u.shape();
    if s.len() != 3 || gate.shape() != s {
        return Err(Error::dim("diag_scan", format!("u {:?}, gate {:?}", s, gate.shape())));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let n = decay.cols();
    if decay.shape() != [d, n] || b_in.shape() != [b, l, n] || c_out.shape() != [b, l, n] {
        return Err(Error::dim(
            "diag_scan",
            format!("decay {:?}, b {:?}, c {:?}", decay.shape(), b_in.shape(), c_out.shape()),
        ));
    }
    let p = [gate, b_in, c_out, decay].iter().fold(u.precision(), |acc, t| acc.join(t.precision()));
    let mut states = vec![0.0; b * l * d * n];
    let mut y = vec![0.0; b * l * d];
    for bi in 0..b {
        for t in 0..l {
            let row = bi * l + t;
            let bt = &b_in.data()[row * n..(row + 1) * n];
            let ct = &c_out.data()[row * n..(row + 1) * n];
            for di in 0..d {
                let g = gate.data()[row * d + di];
                let uv = u.data()[row * d + di];
                let mut acc = 0.0;
                for ni in 0..n {
                    let prev = if t == 0 { 0.0 } else { states[((row - 1) * d + di) * n + ni] };
                    let carry = p.round(p.round(decay.data()[di * n + ni] * g) * prev);
                    let sv = p.round(carry + p.round(bt[ni] * uv));
                    states[(row * d + di) * n + ni] = sv;
                    acc = p.round(acc + p.round(ct[ni] * sv));
                }
                y[row * d + di] = acc;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, l, d], y, p),
        Tensor::from_parts(vec![b, l, d, n], states, p),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DetRng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t2(&[vec![1., 2.], vec![3., 4.]]);
        let b = t2(&[vec![5., 6.], vec![7., 8.]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = DetRng::new(3);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..5 {
                    acc += a.at(&[i, t]) * b.at(&[t, j]);
                }
                assert_eq!(acc.to_bits(), c.at(&[i, j]).to_bits());
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let c = layer_norm(&Tensor::vector(vec![4.0, 4.0, 4.0]), 1e-5);
        assert!(c.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(&Tensor::vector(vec![1.0, 2.0, 3.0]), 1e-5);
        let denom = (2.0f64 / 3.0 + 1e-5).sqrt();
        for (got, x) in y.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - (x - 2.0) / denom).abs() < 1e-14);
        }

        let mut rng = DetRng::new(9);
        let x = Tensor::randn(&[6, 10], 3.0, &mut rng);
        let y = layer_norm(&x, 1e-5);
        for row in y.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() / 10.0 < 1e-12);
        }
    }

    #[test]
    fn mean_pool_cases() {
        let x = t2(&[vec![1., 3.], vec![3., 5.]]);
        assert_eq!(mean_pool(&x).unwrap().data(), &[2., 4.]);
        let one = t2(&[vec![1.5, -2.0]]);
        assert_eq!(mean_pool(&one).unwrap().data(), one.data());
        assert!(matches!(mean_pool(&Tensor::zeros(&[0, 3])), Err(Error::EmptyInput(_))));

        let mut rng = DetRng::new(1);
        let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let got = mean_pool(&x).unwrap();
        for dcol in 0..8 {
            let mut acc = 0.0;
            for l in 0..16 {
                acc += x.at(&[l, dcol]);
            }
            assert_eq!((acc / 16.0).to_bits(), got.data()[dcol].to_bits());
        }
    }

    #[test]
    fn elementwise_cases() {
        let mut rng = DetRng::new(2);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(add_scalar(&a, 0.0), a);
        assert_eq!(silu_scalar(0.0), 0.0);
        let independent = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - independent).abs() < 1e-15);
        assert!(matches!(add(&a, &Tensor::zeros(&[4, 3])), Err(Error::Dimension { .. })));
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Tensor::vector(vec![0.3; 5]));
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let big = softmax_rows(&Tensor::vector(vec![1000.0, 1000.0]));
        assert_eq!(big.data(), &[0.5, 0.5]);
        let mut rng = DetRng::new(5);
        let x = Tensor::randn(&[4, 4], 2.0, &mut rng);
        for row in softmax_rows(&x).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_causal() {
        let mut rng = DetRng::new(11);
        let q = Tensor::randn(&[2, 6, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 6, 8], 1.0, &mut rng);
        let probs = attention_probs(&q, &k, 2).unwrap();
        for (idx, row) in probs.data().chunks(6).enumerate() {
            let i = idx % 6;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[3, 256]);
        let (ce, _) = cross_entropy(&logits, &[0, 5, 255]).unwrap();
        assert!((ce - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_pure() {
        let mut rng = DetRng::new(8);
        let x = Tensor::randn(&[4, 9], 1.0, &mut rng);
        let w = Tensor::randn(&[9, 9], 1.0, &mut rng);
        assert_eq!(matmul(&x, &w).unwrap(), matmul(&x, &w).unwrap());
        assert_eq!(layer_norm(&x, 1e-5), layer_norm(&x, 1e-5));
    }
}
