//! Desk-scale training: byte-level data, AdamW, periodic evaluation,
//! spectra logging, and the sweep and dense-comparison harnesses.

mod data;
mod optim;
mod sweep;

pub use data::{eval_batches, ingest_text, sample_batch, tokenize, Dataset, DEFAULT_TRAIN_FRACTION};
pub use optim::{clip_grad_norm, grad_norm, warmup_lr, AdamW, AdamWConfig};
pub use sweep::{compare_dense, dense_csv, sweep, sweep_csv, DenseComparison, DensePair, SweepAxis, SweepRow};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backward::{compute_gradients, phase1_all, BackwardPlan, InterfaceJacobian, Schedule};
use crate::diagnostics::{spectra_csv, SpectraRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamCounts, Variant};
use crate::scan::Executor;
use crate::tensor::{DetRng, Tensor};

/// Which gradient engine drives the optimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardKind {
    #[default]
    Lbi,
    Oracle,
}

impl BackwardKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lbi" => Ok(BackwardKind::Lbi),
            "oracle" => Ok(BackwardKind::Oracle),
            other => Err(Error::Argument(format!("unknown backward `{other}` (expected lbi or oracle)"))),
        }
    }
}

/// Run configuration; the JSON form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_tokens: usize,
    pub seeds: Vec<u64>,
    pub backward: BackwardKind,
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Spectra are logged every this many steps (never at step 0); 0 disables.
    pub spectra_every: usize,
    /// Corpus path, used by the CLI.
    pub data: Option<PathBuf>,
    pub chunk: Option<usize>,
    pub schedule: Schedule,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            steps: 200,
            lr: 3e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_every: 100,
            eval_tokens: 2048,
            seeds: vec![0],
            backward: BackwardKind::Lbi,
            out_dir: None,
            batch_size: 4,
            warmup_steps: 100,
            spectra_every: 100,
            data: None,
            chunk: None,
            schedule: Schedule::ThreePhase,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn plan(&self) -> Result<BackwardPlan> {
        Ok(BackwardPlan {
            chunk: self.chunk,
            executor: Executor::with_workers(self.workers)?,
            schedule: self.schedule,
            ..BackwardPlan::default()
        })
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Outcome of one seed's run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub backend: String,
    pub variant: String,
    /// `(step, ce)` of every training batch, before that step's update.
    pub train_ce: Vec<(usize, f64)>,
    /// `(step, ce)` at step 0, every `eval_every` steps and at the end.
    pub val_ce: Vec<(usize, f64)>,
    pub final_val_ce: Option<f64>,
    pub wall_time_s: f64,
    pub param_counts: ParamCounts,
    /// Step at which the loss or a gradient became non-finite.
    pub diverged_at: Option<usize>,
    /// Learning rate actually used; half the configured one after a fallback.
    pub lr: f64,
    pub lr_halved: bool,
    #[serde(skip)]
    pub spectra: Vec<SpectraRecord>,
}

impl RunMetrics {
    pub fn initial_train_ce(&self) -> Option<f64> {
        self.train_ce.first().map(|&(_, ce)| ce)
    }

    /// Mean of the last `n` training losses.
    pub fn final_train_ce(&self, n: usize) -> Option<f64> {
        if self.train_ce.is_empty() {
            return None;
        }
        let tail = &self.train_ce[self.train_ce.len().saturating_sub(n.max(1))..];
        Some(tail.iter().map(|(_, ce)| ce).sum::<f64>() / tail.len() as f64)
    }
}

/// A finished run with its trained model.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub model: Model,
}

/// `step,split,ce,seed` for every run.
pub fn metrics_csv(runs: &[RunMetrics]) -> String {
    let mut out = String::from("step,split,ce,seed\n");
    for r in runs {
        for (step, ce) in &r.train_ce {
            let _ = writeln!(out, "{step},train,{ce:.10},{}", r.seed);
        }
        for (step, ce) in &r.val_ce {
            let _ = writeln!(out, "{step},val,{ce:.10},{}", r.seed);
        }
    }
    out
}

fn mean_loss(model: &Model, batches: &[crate::model::Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let n = b.batch * b.len;
        total += model.loss(b)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Loss, gradients and (for the interface backward) Jacobians of one batch.
fn gradients(
    model: &Model,
    batch: &crate::model::Batch,
    backward: BackwardKind,
    plan: &BackwardPlan,
) -> Result<(f64, BTreeMap<String, Tensor>, Option<Vec<InterfaceJacobian>>)> {
    match (backward, model.variant()) {
        (BackwardKind::Lbi, Variant::Interface) => {
            let g = compute_gradients(model, batch, plan)?;
            Ok((g.loss, g.params, Some(g.jacobians)))
        }
        (BackwardKind::Lbi, Variant::Dense) => Err(Error::Config("the interface backward needs the interface variant".into())),
        (BackwardKind::Oracle, _) => {
            let (loss, grads) = model.oracle_gradients(batch)?;
            Ok((loss, grads, None))
        }
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. })
}

/// Trains `model` on `data` with one seed. Batches are drawn from a stream
/// keyed by the seed, so runs that differ only in backward see the same data.
pub fn train_model(config: &TrainConfig, mut model: Model, seed: u64, data: &Dataset, lr: f64) -> Result<RunResult> {
    config.validate()?;
    let plan = config.plan()?;
    let start = Instant::now();
    let len = model.config().seq_len;
    let eval = eval_batches(&data.val, config.eval_tokens, config.batch_size, len)?;
    let mut rng = DetRng::derive(seed, "train-batches");
    let mut opt = AdamW::new(AdamWConfig { lr, ..config.optimizer() });
    let mut metrics = RunMetrics {
        seed,
        backend: model.config().backend.label(),
        variant: match model.variant() {
            Variant::Interface => "interface".into(),
            Variant::Dense => "dense".into(),
        },
        train_ce: Vec::with_capacity(config.steps),
        val_ce: vec![(0, mean_loss(&model, &eval)?)],
        final_val_ce: None,
        wall_time_s: 0.0,
        param_counts: model.param_counts(),
        diverged_at: None,
        lr,
        lr_halved: false,
        spectra: Vec::new(),
    };
    for step in 1..=config.steps {
        let batch = sample_batch(&data.train, config.batch_size, len, &mut rng)?;
        let (loss, mut grads, jacobians) = match gradients(&model, &batch, config.backward, &plan) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                metrics.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        metrics.train_ce.push((step, loss));
        if !loss.is_finite() {
            metrics.diverged_at = Some(step);
            break;
        }
        if config.spectra_every > 0 && step % config.spectra_every == 0 && model.variant() == Variant::Interface {
            let js = match jacobians {
                Some(js) => js,
                None => {
                    let fp = model.forward(&batch)?;
                    phase1_all(&model, &fp.caches, &plan)?
                }
            };
            metrics.spectra.push(SpectraRecord::from_jacobians(step, seed, &js)?);
        }
        clip_grad_norm(&mut grads, config.grad_clip);
        opt.step(model.params_mut(), &grads, warmup_lr(lr, step, config.warmup_steps))?;
        if config.eval_every > 0 && step % config.eval_every == 0 && step != config.steps {
            metrics.val_ce.push((step, mean_loss(&model, &eval)?));
        }
    }
    if metrics.diverged_at.is_none() {
        let v = mean_loss(&model, &eval)?;
        metrics.val_ce.push((config.steps, v));
        metrics.final_val_ce = Some(v);
    }
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(RunResult { metrics, model })
}

fn model_for(config: &TrainConfig, seed: u64, variant: Variant) -> Result<Model> {
    let mc = ModelConfig { seed, ..config.model.clone() };
    match variant {
        Variant::Interface => Model::new(mc),
        Variant::Dense => Model::dense(mc),
    }
}

/// One seed of `variant`. A diverged interface run is retried once at half
/// the learning rate and flagged.
pub fn train_seed(config: &TrainConfig, seed: u64, data: &Dataset, variant: Variant) -> Result<RunResult> {
    let run = train_model(config, model_for(config, seed, variant)?, seed, data, config.lr)?;
    if run.metrics.diverged_at.is_none() || variant == Variant::Dense {
        return Ok(run);
    }
    let mut retry = train_model(config, model_for(config, seed, variant)?, seed, data, config.lr * 0.5)?;
    retry.metrics.lr_halved = true;
    Ok(retry)
}

/// Runs every seed on the interface model and writes `metrics.csv`,
/// `spectra.csv`, `summary.json` and one checkpoint per seed to `out_dir`
/// when set.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<Vec<RunResult>> {
    config.validate()?;
    let runs = config
        .seeds
        .iter()
        .map(|&s| train_seed(config, s, data, Variant::Interface))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &runs)?;
    }
    Ok(runs)
}

pub fn write_outputs(dir: &Path, runs: &[RunResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
    let spectra: Vec<SpectraRecord> = metrics.iter().flat_map(|m| m.spectra.clone()).collect();
    if !spectra.is_empty() {
        std::fs::write(dir.join("spectra.csv"), spectra_csv(&spectra))?;
    }
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&metrics)?)?;
    for r in runs {
        r.model.save(&dir.join(format!("checkpoint_seed{}.lbi", r.metrics.seed)))?;
    }
    Ok(())
}
