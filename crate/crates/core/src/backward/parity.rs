//! Gradient parity between the interface backward and the full-graph oracle.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autodiff::{compare_gradients, GradientReport};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelConfig};
use crate::tensor::DetRng;

use super::{compute_gradients, BackwardPlan};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityRow {
    pub trial: usize,
    pub backend: String,
    pub max_abs: f64,
    pub rel_l2: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParitySummary {
    /// Worst value of each metric across trials.
    pub worst: GradientReport,
    pub rows: Vec<ParityRow>,
}

impl ParitySummary {
    /// `trial,backend,max_abs,rel_l2,cosine`, one row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,backend,max_abs,rel_l2,cosine\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6e},{:.6e},{:.17}", r.trial, r.backend, r.max_abs, r.rel_l2, r.cosine);
        }
        out
    }
}

/// Compares one batch's interface gradients with the oracle's.
pub fn parity_trial(model: &Model, batch: &Batch, plan: &BackwardPlan) -> Result<GradientReport> {
    let lbi = compute_gradients(model, batch, plan)?;
    let (_, oracle) = model.oracle_gradients(batch)?;
    compare_gradients(&lbi.params, &oracle)
}

/// `n_inits` initialisations (seeds `config.seed + i`) times `n_batches`
/// random batches of `batch_size` sequences each.
pub fn parity_suite(
    config: &ModelConfig,
    n_inits: usize,
    n_batches: usize,
    batch_size: usize,
    plan: &BackwardPlan,
) -> Result<ParitySummary> {
    if n_inits == 0 || n_batches == 0 {
        return Err(Error::Argument("parity suite needs at least one trial".into()));
    }
    let mut rows = Vec::with_capacity(n_inits * n_batches);
    let mut worst: Option<GradientReport> = None;
    for i in 0..n_inits {
        let cfg = ModelConfig { seed: config.seed + i as u64, ..config.clone() };
        let model = Model::new(cfg.clone())?;
        let mut rng = DetRng::derive(cfg.seed, "parity-batches");
        for j in 0..n_batches {
            let batch = Batch::random(cfg.vocab_size, batch_size, cfg.seq_len, &mut rng);
            let report = parity_trial(&model, &batch, plan)?;
            rows.push(ParityRow {
                trial: i * n_batches + j,
                backend: cfg.backend.label(),
                max_abs: report.max_abs_error,
                rel_l2: report.rel_l2_error,
                cosine: report.cosine_similarity,
            });
            worst = Some(match worst {
                Some(w) => w.worst(&report),
                None => report,
            });
        }
    }
    Ok(ParitySummary { worst: worst.expect("at least one trial"), rows })
}
