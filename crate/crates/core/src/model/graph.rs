//! Builders that record the model's sub-graphs on a [`Tape`]. Forward passes,
//! the oracle and every region-local rebuild go through these, so all of them
//! perform the same arithmetic in the same order.

use std::collections::BTreeMap;

use super::config::{LayerKind, ModelConfig};
use super::params::ParamStore;
use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Binds parameters to tape leaves on first use.
pub(crate) struct Binder<'a> {
    params: &'a ParamStore,
    vars: BTreeMap<String, Var>,
    on_read: Option<&'a (dyn Fn(&str) + Sync)>,
}

impl<'a> Binder<'a> {
    pub(crate) fn new(params: &'a ParamStore) -> Self {
        Binder { params, vars: BTreeMap::new(), on_read: None }
    }

    pub(crate) fn observed(params: &'a ParamStore, on_read: &'a (dyn Fn(&str) + Sync)) -> Self {
        Binder { params, vars: BTreeMap::new(), on_read: Some(on_read) }
    }

    pub(crate) fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        if let Some(f) = self.on_read {
            f(name);
        }
        let v = tape.param(name, self.params.get(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound `(name, var)` pairs in name order.
    pub(crate) fn bound(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

/// Two-layer bias-free MLP `silu(x w1) w2`.
fn mlp2(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w1 = b.get(tape, &format!("{prefix}.w1"))?;
    let w2 = b.get(tape, &format!("{prefix}.w2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.silu(h)?;
    tape.matmul(h, w2)
}

/// One pre-norm residual layer.
pub(crate) fn layer(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    kind: LayerKind,
    x: Var,
    c: &ModelConfig,
) -> Result<Var> {
    let x = match kind {
        LayerKind::Mlp => x,
        LayerKind::Attention => {
            let a = tape.layer_norm(x, c.eps)?;
            let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|w| format!("{prefix}.attn.{w}"));
            let (wq, wk, wv, wo) = (b.get(tape, &wq)?, b.get(tape, &wk)?, b.get(tape, &wv)?, b.get(tape, &wo)?);
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let o = tape.causal_attention(q, k, v, c.heads)?;
            let o = tape.matmul(o, wo)?;
            tape.add(x, o)?
        }
        LayerKind::DiagSsm => {
            let a = tape.layer_norm(x, c.eps)?;
            let p = |w: &str| format!("{prefix}.ssm.{w}");
            let (wg, wb, wc, wo) = (b.get(tape, &p("wg"))?, b.get(tape, &p("wb"))?, b.get(tape, &p("wc"))?, b.get(tape, &p("wo"))?);
            let decay = b.get(tape, &p("decay"))?;
            let g = tape.matmul(a, wg)?;
            let gate = tape.sigmoid(g)?;
            let b_in = tape.matmul(a, wb)?;
            let c_out = tape.matmul(a, wc)?;
            let y = tape.diag_scan(a, gate, b_in, c_out, decay)?;
            let y = tape.matmul(y, wo)?;
            tape.add(x, y)?
        }
    };
    let a = tape.layer_norm(x, c.eps)?;
    let h = mlp2(tape, b, &format!("{prefix}.mlp"), a)?;
    tape.add(x, h)
}

/// `m_0 = mean_pool(canvas) init.proj`.
pub(crate) fn init_state(tape: &mut Tape, b: &mut Binder, canvas: Var) -> Result<Var> {
    let pooled = tape.mean_pool(canvas)?;
    let w = b.get(tape, "init.proj")?;
    tape.matmul(pooled, w)
}

/// Records region `k`: decode, inject into the canvas, run the layers, pool,
/// encode and update the interface. `bypass` adds an extra activation to the
/// region input and exists only for the audit fixture. Returns `m_{k+1}` and
/// the region's final activation.
pub(crate) fn region(
    tape: &mut Tape,
    b: &mut Binder,
    k: usize,
    m: Var,
    canvas: Var,
    c: &ModelConfig,
    bypass: Option<Var>,
) -> Result<(Var, Var)> {
    let dec = mlp2(tape, b, &format!("region{k}.dec"), m)?;
    let mut x = tape.inject(canvas, dec)?;
    if let Some(extra) = bypass {
        x = tape.add(x, extra)?;
    }
    for l in 0..c.layers_in(k) {
        x = layer(tape, b, &format!("region{k}.layer{l}"), c.kind_of(k), x, c)?;
    }
    let pooled = tape.mean_pool(x)?;
    let enc = mlp2(tape, b, &format!("region{k}.enc"), pooled)?;
    let alpha = b.get(tape, &format!("region{k}.alpha"))?;
    let scaled = tape.scale_by(enc, alpha)?;
    let pre = tape.add(m, scaled)?;
    Ok((tape.layer_norm(pre, c.eps)?, x))
}

/// Loss head: decode `m_K` into the canvas, final norm, vocabulary projection.
pub(crate) fn head(tape: &mut Tape, b: &mut Binder, m: Var, canvas: Var, c: &ModelConfig) -> Result<Var> {
    let dec = mlp2(tape, b, "head.dec", m)?;
    let x = tape.inject(canvas, dec)?;
    let h = tape.layer_norm(x, c.eps)?;
    let w = b.get(tape, "head.proj")?;
    tape.matmul(h, w)
}

/// Dense baseline: all layers stacked residually on the canvas.
pub(crate) fn dense(tape: &mut Tape, b: &mut Binder, canvas: Var, c: &ModelConfig) -> Result<Var> {
    let mut x = canvas;
    let mut l = 0;
    for k in 0..c.regions {
        for _ in 0..c.layers_in(k) {
            x = layer(tape, b, &format!("layer{l}"), c.kind_of(k), x, c)?;
            l += 1;
        }
    }
    let h = tape.layer_norm(x, c.eps)?;
    let w = b.get(tape, "head.proj")?;
    tape.matmul(h, w)
}
