//! Interface Jacobian materialisation by batch-expanded VJPs.
//!
//! For a chunk of `w` basis directions starting at `j0`, the region is
//! rebuilt on `w` stacked copies of the batch. Copy `i` is seeded with the
//! cotangent `e_{j0+i}` on every batch row, so one reverse pass returns rows
//! `j0..j0+w` of every per-element Jacobian. All kernels act row by row, so
//! the result does not depend on the chunk size.

use crate::autodiff::{bit_equal, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, Model};
use crate::tensor::Tensor;

use super::access::{param_owner, Phase, Resource, Tracker};
use super::BackwardPlan;

/// Per-batch-element Jacobians `d m_{k+1} / d m_k` of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceJacobian {
    pub region: usize,
    /// One `[r, r]` matrix per batch element.
    pub per_batch: Vec<Tensor>,
}

/// A map `m [n, r] -> m' [n, r]` acting independently on each row block of
/// the batch, recordable on a tape.
pub trait RegionTransition: Sync {
    fn rank(&self) -> usize;
    /// Records the map on `m`, which holds `copies` stacked copies of the
    /// batch. Returns the tape with the input and output nodes.
    fn record(&self, m: &Tensor, copies: usize) -> Result<(Tape, Var, Var)>;
}

/// `m -> m A^T` per row: the Jacobian of every row is exactly `A`.
#[derive(Clone, Debug)]
pub struct LinearRegion {
    pub a: Tensor,
}

impl RegionTransition for LinearRegion {
    fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    fn record(&self, m: &Tensor, _copies: usize) -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let x = tape.input(m.clone());
        let at = tape.input(self.a.transpose()?);
        let y = tape.matmul(x, at)?;
        Ok((tape, x, y))
    }
}

/// Region `k` of a model, rebuilt from its cache.
pub(crate) struct ModelRegion<'a> {
    pub model: &'a Model,
    pub cache: &'a ForwardCache,
    pub tracker: Tracker<'a>,
}

impl RegionTransition for ModelRegion<'_> {
    fn rank(&self) -> usize {
        self.model.config().rank
    }

    fn record(&self, m: &Tensor, copies: usize) -> Result<(Tape, Var, Var)> {
        let canvas = self.cache.canvas.repeat_batch(copies);
        let regions = self.model.config().regions;
        let tracker = self.tracker;
        let on_read = move |name: &str| tracker.read(Resource::Params(param_owner(name, regions)));
        let rt = self.model.record_region(self.cache.region, m, &canvas, Some(&on_read))?;
        Ok((rt.tape, rt.m_in, rt.m_out))
    }
}

/// Materialises the Jacobian of `transition` at `m` (`[B, r]`) in chunks of
/// `chunk` directions. When `expected` is given, every replayed copy of the
/// output must equal it bitwise.
pub fn jacobian_of(
    transition: &dyn RegionTransition,
    region: usize,
    m: &Tensor,
    expected: Option<&Tensor>,
    chunk: usize,
) -> Result<InterfaceJacobian> {
    let r = transition.rank();
    if m.shape().len() != 2 || m.shape()[1] != r {
        return Err(Error::dim("materialize_jacobian", format!("state {:?} for rank {r}", m.shape())));
    }
    if chunk == 0 || chunk > r {
        return Err(Error::Argument(format!("chunk size {chunk} outside 1..={r}")));
    }
    let batch = m.shape()[0];
    let mut rows = vec![vec![0.0; r * r]; batch];
    let mut j0 = 0;
    while j0 < r {
        let width = chunk.min(r - j0);
        let expanded = m.repeat_batch(width);
        let (tape, m_in, m_out) = transition.record(&expanded, width)?;
        if let Some(want) = expected {
            let out = tape.value(m_out);
            for i in 0..width {
                if !bit_equal(&out.slice_batch(i * batch, (i + 1) * batch), want) {
                    return Err(Error::Integrity {
                        region,
                        detail: format!("replayed output differs from cache (chunk at {j0}, copy {i})"),
                    });
                }
            }
        }
        let mut seed = Tensor::zeros(&[width * batch, r]).with_precision(m.precision());
        for i in 0..width {
            for b in 0..batch {
                seed.data_mut()[(i * batch + b) * r + j0 + i] = 1.0;
            }
        }
        let grad = tape.vjp(m_out, &seed, &[m_in])?.remove(0);
        for i in 0..width {
            for (b, jac) in rows.iter_mut().enumerate() {
                let src = grad.row(i * batch + b);
                jac[(j0 + i) * r..(j0 + i + 1) * r].copy_from_slice(src);
            }
        }
        j0 += width;
    }
    let per_batch = rows
        .into_iter()
        .map(|data| Tensor::new(vec![r, r], data).map(|t| t.with_precision(m.precision())))
        .collect::<Result<_>>()?;
    Ok(InterfaceJacobian { region, per_batch })
}

/// Jacobian of region `cache.region`, rebuilt from its cache with the replay
/// integrity check enabled.
pub fn materialize_jacobian(model: &Model, cache: &ForwardCache, plan: &BackwardPlan) -> Result<InterfaceJacobian> {
    materialize_tracked(model, cache, plan, Tracker { observer: None, task_region: cache.region, phase: Phase::Jacobian })
}

pub(crate) fn materialize_tracked(
    model: &Model,
    cache: &ForwardCache,
    plan: &BackwardPlan,
    tracker: Tracker<'_>,
) -> Result<InterfaceJacobian> {
    tracker.read(Resource::Cache(cache.region));
    tracker.read(Resource::Canvas);
    let chunk = plan.chunk_for(model.config().rank)?;
    let region = ModelRegion { model, cache, tracker };
    let j = jacobian_of(&region, cache.region, &cache.m_in, Some(&cache.m_out), chunk)?;
    tracker.write(Resource::JacobianSlot(cache.region));
    Ok(j)
}

/// Phase 1 over all regions. Tasks share nothing mutable.
pub fn phase1_all(model: &Model, caches: &[ForwardCache], plan: &BackwardPlan) -> Result<Vec<InterfaceJacobian>> {
    phase1_tracked(model, caches, plan, None)
}

pub(crate) fn phase1_tracked(
    model: &Model,
    caches: &[ForwardCache],
    plan: &BackwardPlan,
    observer: Option<&dyn super::AccessObserver>,
) -> Result<Vec<InterfaceJacobian>> {
    plan.executor.map(caches.len(), |k| {
        let tracker = Tracker { observer, task_region: caches[k].region, phase: Phase::Jacobian };
        materialize_tracked(model, &caches[k], plan, tracker)
    })
}
