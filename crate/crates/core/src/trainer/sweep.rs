//! Rank, region-size and backend sweeps, and the dense-baseline comparison.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Backend, Model, ModelConfig, Variant};

use super::{train_seed, BackwardKind, Dataset, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Rank(Vec<usize>),
    /// Region sizes at a fixed total depth; the last region is truncated.
    RegionSize { sizes: Vec<usize>, total_layers: usize },
    Backend(Vec<Backend>),
}

impl SweepAxis {
    pub fn default_rank() -> Self {
        SweepAxis::Rank(vec![16, 32, 64])
    }

    pub fn default_region_size() -> Self {
        SweepAxis::RegionSize { sizes: vec![1, 2, 3, 4], total_layers: 12 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Rank(_) => "rank",
            SweepAxis::RegionSize { .. } => "region_size",
            SweepAxis::Backend(_) => "backend",
        }
    }

    /// `(value label, model config)` for every point of the axis.
    pub fn points(&self, base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
        let points: Vec<(String, ModelConfig)> = match self {
            SweepAxis::Rank(ranks) => {
                ranks.iter().map(|&r| (r.to_string(), ModelConfig { rank: r, ..base.clone() })).collect()
            }
            SweepAxis::RegionSize { sizes, total_layers } => sizes
                .iter()
                .map(|&s| {
                    let mut c = base.clone().with_depth(*total_layers, s);
                    if let Backend::Hybrid(_) = c.backend {
                        c.backend = Backend::default_hybrid(c.regions);
                    }
                    (s.to_string(), c)
                })
                .collect(),
            SweepAxis::Backend(backends) => backends
                .iter()
                .map(|b| {
                    let backend = match b {
                        Backend::Hybrid(k) if k.len() != base.regions => Backend::default_hybrid(base.regions),
                        other => other.clone(),
                    };
                    (backend.label(), ModelConfig { backend, ..base.clone() })
                })
                .collect(),
        };
        if points.is_empty() {
            return Err(Error::Argument(format!("{} sweep has no points", self.name())));
        }
        for (_, c) in &points {
            c.validate()?;
        }
        Ok(points)
    }
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub backend: String,
    pub rank: usize,
    pub region_size: usize,
    pub regions: usize,
    pub backend_params: usize,
    pub interface_params: usize,
    pub total_params: usize,
    pub seed: u64,
    pub final_train_ce: Option<f64>,
    pub final_val_ce: Option<f64>,
    pub diverged_at: Option<usize>,
    pub lr_halved: bool,
}

/// Parameter columns only; used for planning and for tests that skip training.
pub fn sweep_rows_untrained(axis: &SweepAxis, base: &TrainConfig) -> Result<Vec<SweepRow>> {
    axis.points(&base.model)?
        .into_iter()
        .map(|(value, mc)| {
            let counts = Model::new(mc.clone())?.param_counts();
            Ok(SweepRow {
                axis: axis.name().into(),
                value,
                backend: mc.backend.label(),
                rank: mc.rank,
                region_size: mc.layers_per_region,
                regions: mc.regions,
                backend_params: counts.backend,
                interface_params: counts.interface,
                total_params: counts.total(),
                seed: mc.seed,
                final_train_ce: None,
                final_val_ce: None,
                diverged_at: None,
                lr_halved: false,
            })
        })
        .collect()
}

/// Trains every point of the axis for every seed in `base.seeds`.
pub fn sweep(axis: &SweepAxis, base: &TrainConfig, data: &Dataset) -> Result<Vec<SweepRow>> {
    let template = sweep_rows_untrained(axis, base)?;
    let points = axis.points(&base.model)?;
    let mut rows = Vec::new();
    for ((_, mc), row) in points.into_iter().zip(template) {
        let config = TrainConfig { model: mc, ..base.clone() };
        for &seed in &base.seeds {
            let m = train_seed(&config, seed, data, Variant::Interface)?.metrics;
            rows.push(SweepRow {
                seed,
                final_train_ce: m.final_train_ce(10),
                final_val_ce: m.final_val_ce,
                diverged_at: m.diverged_at,
                lr_halved: m.lr_halved,
                ..row.clone()
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "axis,value,backend,rank,region_size,regions,backend_params,interface_params,total_params,seed,final_train_ce,final_val_ce,diverged_at,lr_halved\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.backend,
            r.rank,
            r.region_size,
            r.regions,
            r.backend_params,
            r.interface_params,
            r.total_params,
            r.seed,
            opt(r.final_train_ce),
            opt(r.final_val_ce),
            r.diverged_at.map_or_else(String::new, |s| s.to_string()),
            r.lr_halved
        );
    }
    out
}

/// Interface and dense runs of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensePair {
    pub seed: u64,
    pub interface_initial: f64,
    pub interface_final: f64,
    pub dense_initial: f64,
    pub dense_final: f64,
    pub interface_params: usize,
    pub dense_interface_params: usize,
    /// Interface minus dense final validation CE.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenseComparison {
    pub pairs: Vec<DensePair>,
    pub mean_gap: f64,
    /// Sample standard deviation of the gap across seeds (0 for one seed).
    pub gap_std: f64,
}

/// Trains the interface model (with the configured backward) and the dense
/// baseline (always the oracle backward) on the same data and seeds.
pub fn compare_dense(config: &TrainConfig, data: &Dataset) -> Result<DenseComparison> {
    config.validate()?;
    let dense_config = TrainConfig { backward: BackwardKind::Oracle, ..config.clone() };
    let mut pairs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let a = train_seed(config, seed, data, Variant::Interface)?.metrics;
        let b = train_seed(&dense_config, seed, data, Variant::Dense)?.metrics;
        let diverged = |m: &super::RunMetrics| Error::Data(format!("{} run with seed {seed} diverged", m.variant));
        let a_final = a.final_val_ce.ok_or_else(|| diverged(&a))?;
        let b_final = b.final_val_ce.ok_or_else(|| diverged(&b))?;
        pairs.push(DensePair {
            seed,
            interface_initial: a.val_ce[0].1,
            interface_final: a_final,
            dense_initial: b.val_ce[0].1,
            dense_final: b_final,
            interface_params: a.param_counts.interface,
            dense_interface_params: b.param_counts.interface,
            gap: a_final - b_final,
        });
    }
    let n = pairs.len() as f64;
    let mean_gap = pairs.iter().map(|p| p.gap).sum::<f64>() / n;
    let gap_std = if pairs.len() > 1 {
        (pairs.iter().map(|p| (p.gap - mean_gap).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DenseComparison { pairs, mean_gap, gap_std })
}

pub fn dense_csv(c: &DenseComparison) -> String {
    let mut out = String::from("seed,interface_initial,interface_final,dense_initial,dense_final,gap\n");
    for p in &c.pairs {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:+.6}",
            p.seed, p.interface_initial, p.interface_final, p.dense_initial, p.dense_final, p.gap
        );
    }
    let _ = writeln!(out, "mean,,,,,{:+.6}", c.mean_gap);
    let _ = writeln!(out, "std,,,,,{:.6}", c.gap_std);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { d_model: 16, seq_len: 8, rank: 4, regions: 2, mlp_width: 16, ..ModelConfig::default() },
            steps: 4,
            eval_every: 0,
            eval_tokens: 16,
            batch_size: 2,
            warmup_steps: 0,
            spectra_every: 0,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Dataset {
        Dataset::from_bytes(b"abcabdabeabf".repeat(30), 0.9).unwrap()
    }

    #[test]
    fn region_size_points_truncate() {
        let pts = SweepAxis::RegionSize { sizes: vec![1, 2, 3, 4, 5], total_layers: 12 }.points(&base().model).unwrap();
        let ks: Vec<usize> = pts.iter().map(|(_, c)| c.regions).collect();
        assert_eq!(ks, vec![12, 6, 4, 3, 3]);
        assert_eq!(pts[4].1.layers_in(2), 2);
        assert!(pts.iter().all(|(_, c)| c.total_layer_count() == 12));
    }

    #[test]
    fn interface_params_shrink_with_region_size() {
        let rows = sweep_rows_untrained(&SweepAxis::default_region_size(), &base()).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].interface_params < w[0].interface_params);
            assert_eq!(w[1].backend_params, w[0].backend_params);
        }
    }

    #[test]
    fn rank_sweep_keeps_backend_params() {
        let c = TrainConfig { model: ModelConfig { d_model: 64, ..base().model }, ..base() };
        let rows = sweep_rows_untrained(&SweepAxis::default_rank(), &c).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.backend_params == rows[0].backend_params));
        assert!(rows.windows(2).all(|w| w[1].interface_params > w[0].interface_params));
    }

    #[test]
    fn backend_sweep_fixes_hybrid_length() {
        let pts = SweepAxis::Backend(vec![Backend::Mlp, Backend::default_hybrid(7)]).points(&base().model).unwrap();
        assert_eq!(pts[1].1.backend, Backend::default_hybrid(2));
    }

    #[test]
    fn sweep_trains_each_point() {
        let rows = sweep(&SweepAxis::Rank(vec![2, 4]), &base(), &corpus()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.final_val_ce.is_some()));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn dense_comparison_reports_gap() {
        let c = TrainConfig { seeds: vec![0, 1], ..base() };
        let cmp = compare_dense(&c, &corpus()).unwrap();
        assert_eq!(cmp.pairs.len(), 2);
        assert!(cmp.pairs.iter().all(|p| p.dense_interface_params == 0 && p.interface_params > 0));
        assert!((cmp.pairs[0].gap - (cmp.pairs[0].interface_final - cmp.pairs[0].dense_final)).abs() < 1e-15);
        assert!(dense_csv(&cmp).contains("\nstd,"));
    }
}
