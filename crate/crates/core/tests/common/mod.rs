//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

pub mod corpus;

use lbi_core::model::{Backend, ModelConfig};
use lbi_core::Tensor;
use nalgebra::DMatrix;

/// Singular values of a square matrix from an independent dense SVD, in
/// descending order.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let n = m.shape()[0];
    let mat = DMatrix::from_row_slice(n, m.shape()[1], m.data());
    let mut s: Vec<f64> = mat.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Plain triple-loop product, independent of the crate's kernels.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * m + j]).sum();
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

/// The four backend kinds at a given region count.
pub fn all_backends(regions: usize) -> Vec<Backend> {
    vec![Backend::Mlp, Backend::Attention, Backend::DiagSsm, Backend::default_hybrid(regions)]
}

/// Desk-scale configuration: D=64, L=128, K=4, r=8.
pub fn toy(backend: Backend) -> ModelConfig {
    ModelConfig { backend, ..ModelConfig::default() }
}

/// A smaller configuration for quick structural tests.
pub fn small(backend: Backend) -> ModelConfig {
    ModelConfig { d_model: 16, seq_len: 12, rank: 4, regions: 3, mlp_width: 24, heads: 2, ssm_state: 4, backend, ..ModelConfig::default() }
}
