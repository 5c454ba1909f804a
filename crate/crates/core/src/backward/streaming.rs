//! Streaming schedule: each region's Jacobian is materialised on a worker as
//! soon as its forward pass finishes, while the main thread continues with
//! the next region. Everything synchronises before the scan.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardCache, Model, Variant};
use crate::scan::Executor;

use super::access::{Phase, Tracker};
use super::jacobian::{materialize_tracked, InterfaceJacobian};
use super::region::head_tracked;
use super::{finish, BackwardPlan, LbiGradients};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Forward,
    Jacobian,
}

/// Wall-clock interval of one task, in nanoseconds since the schedule began.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TaskSpan {
    pub kind: SpanKind,
    pub region: usize,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OverlapReport {
    pub spans: Vec<TaskSpan>,
}

impl OverlapReport {
    /// End of the last region forward.
    pub fn forward_end_ns(&self) -> u64 {
        self.spans.iter().filter(|s| s.kind == SpanKind::Forward).map(|s| s.end_ns).max().unwrap_or(0)
    }

    /// Jacobian tasks that started before the forward pass finished.
    pub fn overlapping_jacobians(&self) -> Vec<usize> {
        let end = self.forward_end_ns();
        self.spans
            .iter()
            .filter(|s| s.kind == SpanKind::Jacobian && s.start_ns < end)
            .map(|s| s.region)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,region,start_ns,end_ns\n");
        for s in &self.spans {
            let kind = match s.kind {
                SpanKind::Forward => "forward",
                SpanKind::Jacobian => "jacobian",
            };
            out.push_str(&format!("{kind},{},{},{}\n", s.region, s.start_ns, s.end_ns));
        }
        out
    }
}

struct Clock(Instant);

impl Clock {
    fn now(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

/// Forward with overlapped Jacobian construction, then scan and local
/// passes. Gradients are bitwise equal to the three-phase schedule. With the
/// serial executor all forwards run before any Jacobian.
pub fn streaming_backward(model: &Model, batch: &Batch, plan: &BackwardPlan) -> Result<(LbiGradients, OverlapReport)> {
    if model.variant() != Variant::Interface {
        return Err(Error::Argument("the interface backward needs the interface variant".into()));
    }
    let regions = model.config().regions;
    let clock = Clock(Instant::now());
    let spans = Mutex::new(Vec::new());
    let slots: Vec<Mutex<Option<Result<InterfaceJacobian>>>> = (0..regions).map(|_| Mutex::new(None)).collect();

    let jacobian_task = |cache: &ForwardCache| {
        let start = clock.now();
        let tracker = Tracker { observer: None, task_region: cache.region, phase: Phase::Jacobian };
        let j = materialize_tracked(model, cache, plan, tracker);
        let end = clock.now();
        spans.lock().expect("span log").push(TaskSpan { kind: SpanKind::Jacobian, region: cache.region, start_ns: start, end_ns: end });
        *slots[cache.region].lock().expect("jacobian slot") = Some(j);
    };

    let canvas = Arc::new(model.embed_tokens(&batch.tokens, batch.batch, batch.len)?);
    let mut m = model.init_interface(&canvas)?;
    let mut caches: Vec<Arc<ForwardCache>> = Vec::with_capacity(regions);
    let forward = |k: usize, m: &mut crate::tensor::Tensor| -> Result<Arc<ForwardCache>> {
        let start = clock.now();
        let (next, cache) = model.region_forward(k, m, &canvas)?;
        let end = clock.now();
        spans.lock().expect("span log").push(TaskSpan { kind: SpanKind::Forward, region: k, start_ns: start, end_ns: end });
        *m = next;
        Ok(Arc::new(cache))
    };

    match &plan.executor {
        Executor::Serial => {
            for k in 0..regions {
                caches.push(forward(k, &mut m)?);
            }
            for cache in &caches {
                jacobian_task(cache);
            }
        }
        Executor::Pooled(pool) => {
            pool.in_place_scope(|s| -> Result<()> {
                for k in 0..regions {
                    let cache = forward(k, &mut m)?;
                    caches.push(cache.clone());
                    let task = &jacobian_task;
                    s.spawn(move |_| task(&cache));
                    // give the worker a chance to start on a busy core
                    std::thread::yield_now();
                }
                Ok(())
            })?;
        }
    }

    let head_tracker = Tracker { observer: None, task_region: regions - 1, phase: Phase::Head };
    let head = head_tracked(model, &m, &canvas, &batch.targets, head_tracker)?;

    let mut jacobians = Vec::with_capacity(regions);
    for slot in slots {
        let j = slot.into_inner().expect("jacobian slot").ok_or_else(|| Error::Argument("jacobian task did not run".into()))?;
        jacobians.push(j?);
    }
    let caches: Vec<ForwardCache> = caches.iter().map(|c| (**c).clone()).collect();
    let grads = finish(model, batch, &caches, &canvas, head, jacobians, plan, None)?;
    let mut spans = spans.into_inner().expect("span log");
    spans.sort_by_key(|s| (s.start_ns, s.region));
    Ok((grads, OverlapReport { spans }))
}
