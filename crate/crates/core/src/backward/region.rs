//! Region-local reverse passes: the loss head, each region given its output
//! adjoint, and the initial projection.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, Model};
use crate::tensor::Tensor;

use super::access::{param_owner, Phase, Resource, Tracker};

/// Gradients produced by one local reverse pass.
#[derive(Clone, Debug)]
pub struct LocalGradients {
    pub params: BTreeMap<String, Tensor>,
    /// This pass's contribution to the canvas adjoint `[B, L, D]`.
    pub canvas: Tensor,
}

/// Loss-head reverse pass: the terminal adjoint `m̄_K` plus head gradients.
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub loss: f64,
    pub terminal_adjoint: Tensor,
    pub local: LocalGradients,
}

fn split(params: &[(String, Var)], grads: Vec<Tensor>) -> (BTreeMap<String, Tensor>, Vec<Tensor>) {
    let mut it = grads.into_iter();
    let map = params.iter().map(|(n, _)| (n.clone(), it.next().expect("one gradient per target"))).collect();
    (map, it.collect())
}

fn check_finite(region: usize, grads: &BTreeMap<String, Tensor>, extra: &[(&str, &Tensor)]) -> Result<()> {
    for (name, g) in grads.iter().map(|(n, g)| (n.as_str(), g)).chain(extra.iter().copied()) {
        if !g.all_finite() {
            return Err(Error::Numeric { region, param: name.to_string() });
        }
    }
    Ok(())
}

fn unit_seed(model: &Model) -> Tensor {
    Tensor::scalar(1.0).with_precision(model.config().precision)
}

pub(crate) fn head_tracked(
    model: &Model,
    m_terminal: &Tensor,
    canvas: &Tensor,
    targets: &Arc<Vec<usize>>,
    tracker: Tracker<'_>,
) -> Result<HeadGradients> {
    let regions = model.config().regions;
    tracker.read(Resource::Canvas);
    let on_read = move |name: &str| tracker.read(Resource::Params(param_owner(name, regions)));
    let ht = model.record_head(m_terminal, canvas, targets, Some(&on_read))?;
    let mut targets_v: Vec<Var> = ht.params.iter().map(|(_, v)| *v).collect();
    targets_v.push(ht.m_in);
    targets_v.push(ht.canvas);
    let grads = ht.tape.grad_wrt(ht.loss, &unit_seed(model), &targets_v)?;
    let (params, mut rest) = split(&ht.params, grads);
    let canvas_g = rest.pop().expect("canvas gradient");
    let m_bar = rest.pop().expect("terminal adjoint");
    check_finite(regions, &params, &[("terminal adjoint", &m_bar), ("canvas", &canvas_g)])?;
    tracker.write(Resource::Adjoint(regions));
    tracker.write(Resource::GradSlot(regions - 1));
    Ok(HeadGradients {
        loss: ht.tape.value(ht.loss).data()[0],
        terminal_adjoint: m_bar,
        local: LocalGradients { params, canvas: canvas_g },
    })
}

/// Reverse pass through the loss head from the terminal state.
pub fn head_backward(model: &Model, m_terminal: &Tensor, canvas: &Tensor, targets: &Arc<Vec<usize>>) -> Result<HeadGradients> {
    let tracker = Tracker { observer: None, task_region: model.config().regions - 1, phase: Phase::Head };
    head_tracked(model, m_terminal, canvas, targets, tracker)
}

pub(crate) fn region_tracked(
    model: &Model,
    cache: &ForwardCache,
    adjoint_out: &Tensor,
    tracker: Tracker<'_>,
) -> Result<LocalGradients> {
    let k = cache.region;
    let regions = model.config().regions;
    tracker.read(Resource::Cache(k));
    tracker.read(Resource::Canvas);
    tracker.read(Resource::Adjoint(k + 1));
    let on_read = move |name: &str| tracker.read(Resource::Params(param_owner(name, regions)));
    let rt = model.record_region(k, &cache.m_in, &cache.canvas, Some(&on_read))?;
    if adjoint_out.shape() != rt.tape.value(rt.m_out).shape() {
        return Err(Error::dim("phase3_region_backward", format!("adjoint {:?}", adjoint_out.shape())));
    }
    let mut targets_v: Vec<Var> = rt.params.iter().map(|(_, v)| *v).collect();
    targets_v.push(rt.canvas);
    let grads = rt.tape.grad_wrt(rt.m_out, adjoint_out, &targets_v)?;
    let (params, mut rest) = split(&rt.params, grads);
    let canvas_g = rest.pop().expect("canvas gradient");
    check_finite(k, &params, &[("canvas", &canvas_g)])?;
    tracker.write(Resource::GradSlot(k));
    tracker.write(Resource::CanvasPartial(k));
    Ok(LocalGradients { params, canvas: canvas_g })
}

/// Gradients of region `k`'s parameters and canvas contribution, seeded
/// with the adjoint of its output `m̄_{k+1}`.
pub fn phase3_region_backward(model: &Model, cache: &ForwardCache, adjoint_out: &Tensor) -> Result<LocalGradients> {
    let tracker = Tracker { observer: None, task_region: cache.region, phase: Phase::RegionBackward };
    region_tracked(model, cache, adjoint_out, tracker)
}

/// Reverse pass through `m_0 = mean_pool(canvas) init.proj`.
pub(crate) fn init_tracked(model: &Model, canvas: &Tensor, adjoint0: &Tensor, tracker: Tracker<'_>) -> Result<LocalGradients> {
    tracker.read(Resource::Adjoint(0));
    tracker.read(Resource::Params(0));
    let (tape, c, m0, params) = model.record_init(canvas)?;
    let mut targets_v: Vec<Var> = params.iter().map(|(_, v)| *v).collect();
    targets_v.push(c);
    let grads = tape.grad_wrt(m0, adjoint0, &targets_v)?;
    let (params, mut rest) = split(&params, grads);
    let canvas_g = rest.pop().expect("canvas gradient");
    check_finite(0, &params, &[("canvas", &canvas_g)])?;
    Ok(LocalGradients { params, canvas: canvas_g })
}

/// Scatters a canvas adjoint `[B, L, D]` into the embedding table gradient.
pub(crate) fn embedding_gradient(model: &Model, tokens: &Arc<Vec<usize>>, canvas_adjoint: &Tensor) -> Result<Tensor> {
    let s = canvas_adjoint.shape();
    let mut tape = Tape::new();
    let table = tape.input(model.params().get("embed")?.clone());
    let canvas = tape.gather(table, tokens.clone(), s[0], s[1])?;
    let g = tape.grad_wrt(canvas, canvas_adjoint, &[table])?.remove(0);
    if !g.all_finite() {
        return Err(Error::Numeric { region: 0, param: "embed".into() });
    }
    Ok(g)
}
