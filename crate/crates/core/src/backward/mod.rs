//! Backpropagation through the interface chain in three phases:
//!
//! 1. materialise every region's `r x r` interface Jacobian (independent per
//!    region),
//! 2. suffix-scan the transposed Jacobians to get every boundary adjoint
//!    from the terminal one,
//! 3. run each region's local reverse pass seeded with its output adjoint
//!    (independent per region).
//!
//! The loss head runs first to provide the terminal adjoint. Canvas adjoint
//! contributions are reduced in a fixed order (initial projection, regions
//! ascending, head) and then scattered into the embedding table.

mod access;
mod jacobian;
mod parity;
mod region;
mod streaming;

pub use access::{Access, AccessLog, AccessObserver, Phase, Resource};
pub use jacobian::{jacobian_of, materialize_jacobian, phase1_all, InterfaceJacobian, LinearRegion, RegionTransition};
pub use parity::{parity_suite, parity_trial, ParityRow, ParitySummary};
pub use region::{head_backward, phase3_region_backward, HeadGradients, LocalGradients};
pub use streaming::{streaming_backward, OverlapReport, SpanKind, TaskSpan};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardCache, ForwardPass, Model, Variant};
use crate::scan::{self, Executor, ScanStats, SuffixProducts, DEFAULT_TREE_THRESHOLD};
use crate::tensor::Tensor;

use access::Tracker;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    ThreePhase,
    Streaming,
}

#[derive(Clone, Debug)]
pub struct BackwardPlan {
    /// Basis directions per recomputation pass; `None` means `r`.
    pub chunk: Option<usize>,
    pub executor: Executor,
    pub schedule: Schedule,
    /// Chains shorter than this use the sequential fold.
    pub tree_threshold: usize,
}

impl Default for BackwardPlan {
    fn default() -> Self {
        BackwardPlan { chunk: None, executor: Executor::Serial, schedule: Schedule::ThreePhase, tree_threshold: DEFAULT_TREE_THRESHOLD }
    }
}

impl BackwardPlan {
    pub fn chunk_for(&self, rank: usize) -> Result<usize> {
        let c = self.chunk.unwrap_or(rank);
        if c == 0 || c > rank {
            return Err(Error::Config(format!("chunk size {c} must be in 1..={rank}")));
        }
        Ok(c)
    }
}

/// Everything the interface backward produces.
#[derive(Clone, Debug)]
pub struct LbiGradients {
    pub loss: f64,
    /// `m̄_0 ..= m̄_K`, each `[B, r]`.
    pub interface_adjoints: Vec<Tensor>,
    /// One entry per trainable parameter.
    pub params: BTreeMap<String, Tensor>,
    pub jacobians: Vec<InterfaceJacobian>,
    /// Suffix products per batch element.
    pub suffix_products: Vec<SuffixProducts>,
    pub scan_stats: ScanStats,
}

/// Phase 2: per-batch-element suffix scans and boundary adjoints.
pub(crate) fn phase2(
    jacobians: &[InterfaceJacobian],
    terminal: &Tensor,
    plan: &BackwardPlan,
) -> Result<(Vec<Tensor>, Vec<SuffixProducts>, ScanStats)> {
    let (batch, r) = (terminal.shape()[0], terminal.shape()[1]);
    let regions = jacobians.len();
    let per_batch = plan.executor.map(batch, |b| {
        let js: Vec<Tensor> = jacobians.iter().map(|j| j.per_batch[b].clone()).collect();
        let (p, stats) = scan::suffix_scan(&js, r, &plan.executor, plan.tree_threshold)?;
        let term = Tensor::vector(terminal.row(b).to_vec()).with_precision(terminal.precision());
        let adj = scan::apply_adjoints(&p, &term)?;
        Ok((p, stats, adj))
    })?;
    let mut adjoints = vec![vec![0.0; batch * r]; regions + 1];
    let mut products = Vec::with_capacity(batch);
    let mut stats = ScanStats::default();
    for (b, (p, s, adj)) in per_batch.into_iter().enumerate() {
        for (k, a) in adj.iter().enumerate() {
            adjoints[k][b * r..(b + 1) * r].copy_from_slice(a.data());
        }
        products.push(p);
        stats = s;
    }
    let adjoints = adjoints
        .into_iter()
        .map(|d| Tensor::new(vec![batch, r], d).map(|t| t.with_precision(terminal.precision())))
        .collect::<Result<_>>()?;
    Ok((adjoints, products, stats))
}

/// Phases 2 and 3 plus the final reductions, given Phase 1 output and the
/// head pass.
pub(crate) fn finish(
    model: &Model,
    batch: &Batch,
    caches: &[ForwardCache],
    canvas: &Tensor,
    head: HeadGradients,
    jacobians: Vec<InterfaceJacobian>,
    plan: &BackwardPlan,
    observer: Option<&dyn AccessObserver>,
) -> Result<LbiGradients> {
    let (adjoints, suffix_products, scan_stats) = phase2(&jacobians, &head.terminal_adjoint, plan)?;

    let locals = plan.executor.map(caches.len(), |k| {
        let tracker = Tracker { observer, task_region: k, phase: Phase::RegionBackward };
        let mut local = region::region_tracked(model, &caches[k], &adjoints[k + 1], tracker)?;
        if k == 0 {
            let init = region::init_tracked(model, canvas, &adjoints[0], tracker)?;
            local.params.extend(init.params);
            // region 0's task owns both partials; keep them apart for the reducer
            return Ok((local, Some(init.canvas)));
        }
        Ok((local, None))
    })?;

    let mut params = BTreeMap::new();
    let mut canvas_adj: Option<Tensor> = None;
    let mut add_canvas = |g: &Tensor| -> Result<()> {
        match &mut canvas_adj {
            Some(acc) => acc.add_assign(g),
            None => {
                canvas_adj = Some(g.clone());
                Ok(())
            }
        }
    };
    if let Some((_, Some(init_canvas))) = locals.first() {
        add_canvas(init_canvas)?;
    }
    for (local, _) in &locals {
        add_canvas(&local.canvas)?;
    }
    add_canvas(&head.local.canvas)?;
    for (local, _) in locals {
        params.extend(local.params);
    }
    params.extend(head.local.params);
    let canvas_adj = canvas_adj.expect("at least the head contributes");
    params.insert("embed".into(), region::embedding_gradient(model, &batch.tokens, &canvas_adj)?);

    for name in model.params().names() {
        if !params.contains_key(name) {
            return Err(Error::Argument(format!("no gradient produced for `{name}`")));
        }
    }
    Ok(LbiGradients {
        loss: head.loss,
        interface_adjoints: adjoints,
        params,
        jacobians,
        suffix_products,
        scan_stats,
    })
}

/// Three-phase backward from a completed forward pass.
pub fn lbi_backward(model: &Model, batch: &Batch, fp: &ForwardPass, plan: &BackwardPlan) -> Result<LbiGradients> {
    lbi_backward_observed(model, batch, fp, plan, None)
}

pub fn lbi_backward_observed(
    model: &Model,
    batch: &Batch,
    fp: &ForwardPass,
    plan: &BackwardPlan,
    observer: Option<&dyn AccessObserver>,
) -> Result<LbiGradients> {
    if model.variant() != Variant::Interface {
        return Err(Error::Argument("the interface backward needs the interface variant".into()));
    }
    let regions = model.config().regions;
    let head_tracker = Tracker { observer, task_region: regions - 1, phase: Phase::Head };
    let head = region::head_tracked(model, &fp.chain[regions], &fp.canvas, &batch.targets, head_tracker)?;
    let jacobians = jacobian::phase1_tracked(model, &fp.caches, plan, observer)?;
    finish(model, batch, &fp.caches, &fp.canvas, head, jacobians, plan, observer)
}

/// Forward plus backward under the plan's schedule.
pub fn compute_gradients(model: &Model, batch: &Batch, plan: &BackwardPlan) -> Result<LbiGradients> {
    match plan.schedule {
        Schedule::ThreePhase => {
            let fp = model.forward(batch)?;
            lbi_backward(model, batch, &fp, plan)
        }
        Schedule::Streaming => Ok(streaming_backward(model, batch, plan)?.0),
    }
}

#[cfg(test)]
mod tests;
