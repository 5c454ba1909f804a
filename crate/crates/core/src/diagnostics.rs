//! Spectral diagnostics of interface Jacobians: local and suffix-composed
//! spectral norms, rank-normalised Frobenius norms and their CSV log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backward::InterfaceJacobian;
use crate::error::{Error, Result};
use crate::scan;
use crate::tensor::{DetRng, Tensor};

pub const DEFAULT_POWER_TOL: f64 = 1e-10;
pub const DEFAULT_POWER_ITERS: usize = 1000;

const START_SEED: u64 = 0x5eed_5eed;

/// Largest singular value estimate from power iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn square(m: &Tensor, op: &'static str) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim(op, format!("expected a square matrix, got {s:?}")));
    }
    Ok(s[0])
}

fn matvec(m: &[f64], n: usize, v: &[f64], transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let a = if transpose { m[j * n + i] } else { m[i * n + j] };
            out[i] += a * v[j];
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power iteration on `M^T M` from a fixed pseudo-random start. Stops when
/// the Rayleigh quotient changes by less than `tol` relative; otherwise
/// returns the last estimate with `converged = false`.
pub fn spectral_norm(m: &Tensor, max_iters: usize, tol: f64) -> Result<SpectralNorm> {
    let n = square(m, "spectral_norm")?;
    if !m.all_finite() {
        return Err(Error::Argument("spectral_norm needs a finite matrix".into()));
    }
    if n == 0 || m.max_abs() == 0.0 {
        return Ok(SpectralNorm { value: 0.0, iterations: 0, converged: true });
    }
    let data = m.data();
    let mut rng = DetRng::new(START_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut lambda = 0.0;
    for it in 1..=max_iters {
        let mv = matvec(data, n, &v, false);
        let next = norm(&mv).powi(2);
        let w = matvec(data, n, &mv, true);
        let wn = norm(&w);
        if wn == 0.0 {
            // start vector fell in the null space of M; any unit vector outside works
            v = vec![0.0; n];
            v[it % n] = 1.0;
            continue;
        }
        let done = it > 1 && (next - lambda).abs() <= tol * next;
        lambda = next;
        if done {
            return Ok(SpectralNorm { value: lambda.sqrt(), iterations: it, converged: true });
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(SpectralNorm { value: lambda.sqrt(), iterations: max_iters, converged: false })
}

/// `sqrt(sum M^2 / r)`, the RMS singular value of a square matrix.
pub fn frobenius_rms(m: &Tensor) -> Result<f64> {
    let n = square(m, "frobenius_rms")?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok((m.data().iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt())
}

/// Spectral norms of each `J_k` and of each suffix product
/// `P_k = J_k^T ... J_{K-1}^T` for `k < K`.
pub fn suffix_norms(js: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = js.first().ok_or(Error::EmptyInput("suffix_norms"))?;
    let rank = square(first, "suffix_norms")?;
    let p = scan::suffix_scan_sequential(js, rank)?;
    let spec = |m: &Tensor| spectral_norm(m, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL).map(|s| s.value);
    let local = js.iter().map(spec).collect::<Result<Vec<_>>>()?;
    let suffix = p.products[..js.len()].iter().map(spec).collect::<Result<Vec<_>>>()?;
    Ok((local, suffix))
}

/// Norms for one logged step, computed on the first batch element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectraRecord {
    pub step: usize,
    pub seed: u64,
    pub local_spec: Vec<f64>,
    pub suffix_spec: Vec<f64>,
    pub frob_rms: Vec<f64>,
}

impl SpectraRecord {
    pub fn from_jacobians(step: usize, seed: u64, jacobians: &[InterfaceJacobian]) -> Result<Self> {
        let js = jacobians
            .iter()
            .map(|j| j.per_batch.first().cloned().ok_or(Error::EmptyInput("spectra record")))
            .collect::<Result<Vec<_>>>()?;
        let (local_spec, suffix_spec) = suffix_norms(&js)?;
        let frob_rms = js.iter().map(frobenius_rms).collect::<Result<_>>()?;
        Ok(SpectraRecord { step, seed, local_spec, suffix_spec, frob_rms })
    }

    /// `||P_k|| <= prod_{j >= k} ||J_j||`, with relative slack.
    pub fn submultiplicative(&self, slack: f64) -> bool {
        let mut bound = 1.0;
        for k in (0..self.local_spec.len()).rev() {
            bound *= self.local_spec[k];
            if self.suffix_spec[k] > bound * (1.0 + slack) + slack {
                return false;
            }
        }
        true
    }

    /// RMS singular value never exceeds the largest one.
    pub fn rms_below_spectral(&self, slack: f64) -> bool {
        self.frob_rms.iter().zip(&self.local_spec).all(|(f, s)| *f <= s * (1.0 + slack))
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectraRow {
    pub step: usize,
    pub seed: u64,
    pub region: usize,
    pub local_spec: f64,
    pub suffix_spec: f64,
    pub frob_rms: f64,
}

pub const SPECTRA_HEADER: &str = "step,seed,region,local_spec,suffix_spec,frob_rms";

/// One row per `(step, region)` sorted by step, region then seed. Values
/// carry 17 significant digits so they parse back exactly.
pub fn spectra_csv(records: &[SpectraRecord]) -> String {
    let mut rows: Vec<SpectraRow> = records
        .iter()
        .flat_map(|r| {
            (0..r.local_spec.len()).map(move |k| SpectraRow {
                step: r.step,
                seed: r.seed,
                region: k,
                local_spec: r.local_spec[k],
                suffix_spec: r.suffix_spec[k],
                frob_rms: r.frob_rms[k],
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.step, r.region, r.seed));
    let mut out = format!("{SPECTRA_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{:.16e}",
            r.step, r.seed, r.region, r.local_spec, r.suffix_spec, r.frob_rms
        );
    }
    out
}

pub fn emit_spectra(records: &[SpectraRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput("emit_spectra"));
    }
    std::fs::write(path, spectra_csv(records))?;
    Ok(())
}

pub fn parse_spectra_csv(text: &str) -> Result<Vec<SpectraRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SPECTRA_HEADER) {
        return Err(Error::Data("spectra CSV header mismatch".into()));
    }
    let bad = |line: &str| Error::Data(format!("malformed spectra row `{line}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(SpectraRow {
                step: f[0].parse().map_err(|_| bad(line))?,
                seed: f[1].parse().map_err(|_| bad(line))?,
                region: f[2].parse().map_err(|_| bad(line))?,
                local_spec: float(f[3])?,
                suffix_spec: float(f[4])?,
                frob_rms: float(f[5])?,
            })
        })
        .collect()
}
