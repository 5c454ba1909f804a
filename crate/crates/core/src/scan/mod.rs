//! Suffix products of transposed interface Jacobians,
//! `P_k = J_k^T J_{k+1}^T ... J_{K-1}^T` with `P_K = I`.
//!
//! The sequential fold is the reference. The tree scan uses a fixed
//! Sklansky-style combination tree: at level `l`, every position whose
//! distance from the end has bit `l` set absorbs the block that follows it.
//! The tree depends only on `K`, never on the worker count, so results are
//! identical for every executor.

mod executor;
mod trace;

pub use executor::Executor;
pub use trace::{read_trace, write_trace, Trace};

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Below this many Jacobians the tree scan falls back to the sequential fold.
pub const DEFAULT_TREE_THRESHOLD: usize = 4;

/// Suffix products `P_0 ..= P_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffixProducts {
    pub products: Vec<Tensor>,
}

impl SuffixProducts {
    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }
}

/// Combine instrumentation for one scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ScanStats {
    pub combines: usize,
    /// Number of tree levels that performed at least one combine.
    pub depth: usize,
}

fn check_square(js: &[Tensor], rank: usize) -> Result<()> {
    for (k, j) in js.iter().enumerate() {
        if j.shape() != [rank, rank] {
            return Err(Error::dim("suffix_scan", format!("J_{k} has shape {:?}, expected [{rank}, {rank}]", j.shape())));
        }
    }
    Ok(())
}

/// Right fold `P_k = J_k^T P_{k+1}` from `P_K = I`.
pub fn suffix_scan_sequential(js: &[Tensor], rank: usize) -> Result<SuffixProducts> {
    check_square(js, rank)?;
    let mut products = vec![Tensor::eye(rank); js.len() + 1];
    for k in (0..js.len()).rev() {
        products[k] = tensor::matmul(&js[k].transpose()?, &products[k + 1])?;
    }
    Ok(SuffixProducts { products })
}

/// Tree-structured suffix scan with depth `ceil(log2 K)`.
pub fn suffix_scan_parallel(js: &[Tensor], rank: usize, exec: &Executor) -> Result<(SuffixProducts, ScanStats)> {
    check_square(js, rank)?;
    let k_total = js.len();
    let transposed = exec.map(k_total, |k| js[k].transpose())?;
    let mut partial: Vec<Tensor> = transposed;
    let combines = AtomicUsize::new(0);
    let mut depth = 0;
    let mut level = 0;
    while (1usize << level) < k_total {
        // reversed index i = K-1-k; positions with bit `level` set absorb
        // the block starting right after their own block
        let pairs: Vec<(usize, usize)> = (0..k_total)
            .filter_map(|k| {
                let i = k_total - 1 - k;
                if i & (1 << level) == 0 {
                    return None;
                }
                let block_start = (i >> level) << level;
                Some((k, k_total - block_start))
            })
            .collect();
        if !pairs.is_empty() {
            depth += 1;
        }
        let snapshot = &partial;
        let updated = exec.map(pairs.len(), |p| {
            let (k, later) = pairs[p];
            combines.fetch_add(1, Ordering::Relaxed);
            tensor::matmul(&snapshot[k], &snapshot[later])
        })?;
        for ((k, _), value) in pairs.iter().zip(updated) {
            partial[*k] = value;
        }
        level += 1;
    }
    partial.push(Tensor::eye(rank));
    Ok((
        SuffixProducts { products: partial },
        ScanStats { combines: combines.into_inner(), depth },
    ))
}

/// Routes short chains to the sequential fold and longer ones to the tree.
pub fn suffix_scan(js: &[Tensor], rank: usize, exec: &Executor, tree_threshold: usize) -> Result<(SuffixProducts, ScanStats)> {
    if js.len() < tree_threshold {
        let p = suffix_scan_sequential(js, rank)?;
        Ok((p, ScanStats { combines: js.len(), depth: js.len() }))
    } else {
        suffix_scan_parallel(js, rank, exec)
    }
}

/// `m̄_k = P_k m̄_K` for every `k`.
pub fn apply_adjoints(p: &SuffixProducts, terminal: &Tensor) -> Result<Vec<Tensor>> {
    let r = terminal.len();
    p.products
        .iter()
        .map(|pk| {
            if pk.shape() != [r, r] {
                return Err(Error::dim("apply_adjoints", format!("P {:?} vs adjoint of length {r}", pk.shape())));
            }
            let col = terminal.reshape(&[r, 1])?;
            tensor::matmul(pk, &col)?.reshape(terminal.shape())
        })
        .collect()
}

/// Relative Frobenius distance `|a - b| / |b|` (absolute when `b = 0`).
pub fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb = b.frobenius();
    if nb == 0.0 {
        diff
    } else {
        diff / nb
    }
}
