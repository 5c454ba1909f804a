//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every kernel application as a node holding its output
//! value and whatever the backward rule needs. Node ids are assigned in
//! execution order, so the tape is topologically sorted by construction.
//!
//! Backward passes only visit nodes that both feed the seeded output and
//! depend on a requested leaf; everything else is skipped. That is what lets
//! a VJP against interface states avoid computing parameter gradients.

mod check;
mod rules;

pub use check::{compare_gradients, finite_difference_jacobian, GradientReport};

use std::collections::BTreeMap;
use std::sync::Arc;

use rules::{Op, Saved};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Saved,
}

/// Structural description of one recorded node, used to compare recordings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSignature {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    outputs: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, name: Option<String>, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf { name }, inputs: vec![], value, saved: Saved::None });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.leaf(Some(name.into()), value)
    }

    /// An unnamed leaf (data, cached boundary values).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(None, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn set_outputs(&mut self, outputs: Vec<Var>) {
        self.outputs = outputs;
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Argument(format!("node {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        for &v in &inputs {
            self.check(v)?;
        }
        let (value, saved) = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            rules::eval(&op, &xs)?
        };
        self.nodes.push(Node { op, inputs, value, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        self.push(Op::MatMul, vec![a, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(c), vec![a])
    }

    /// `x * s` where `s` is a one-element tensor on the tape.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy, vec![x, s])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu, vec![a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, vec![a])
    }

    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanPool, vec![a])
    }

    pub fn inject(&mut self, canvas: Var, v: Var) -> Result<Var> {
        self.push(Op::Inject, vec![canvas, v])
    }

    pub fn gather(&mut self, table: Var, ids: Arc<Vec<usize>>, batch: usize, len: usize) -> Result<Var> {
        self.push(Op::Gather { ids, batch, len }, vec![table])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.push(Op::Attention { heads }, vec![q, k, v])
    }

    pub fn diag_scan(&mut self, u: Var, gate: Var, b_in: Var, c_out: Var, decay: Var) -> Result<Var> {
        self.push(Op::DiagScan, vec![u, gate, b_in, c_out, decay])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        self.push(Op::CrossEntropy { targets }, vec![logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, vec![a])
    }

    /// Row argmax has no backward rule and cannot be recorded.
    pub fn argmax_rows(&mut self, _a: Var) -> Result<Var> {
        Err(Error::Unsupported("argmax_rows"))
    }

    pub fn signature(&self) -> Vec<NodeSignature> {
        self.nodes
            .iter()
            .map(|n| NodeSignature {
                kind: n.op.kind(),
                inputs: n.inputs.iter().map(|v| v.0).collect(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Re-evaluates every node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                _ => {
                    let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    rules::eval(&node.op, &xs)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when replaying reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let values = self.replay()?;
        Ok(values.iter().zip(&self.nodes).all(|(v, n)| bit_equal(v, &n.value)))
    }

    /// Cotangents of `output` (seeded with `seed`) with respect to `targets`.
    /// Targets with no path from the output get zeros.
    pub fn grad_wrt(&self, output: Var, seed: &Tensor, targets: &[Var]) -> Result<Vec<Tensor>> {
        self.check(output)?;
        for &t in targets {
            self.check(t)?;
        }
        let out_value = &self.nodes[output.0].value;
        if seed.shape() != out_value.shape() {
            return Err(Error::dim(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out_value.shape()),
            ));
        }

        let n = output.0 + 1;
        let mut depends = vec![false; n];
        let mut slot = vec![usize::MAX; n];
        for (i, t) in targets.iter().enumerate() {
            if t.0 < n {
                depends[t.0] = true;
                if slot[t.0] == usize::MAX {
                    slot[t.0] = i;
                }
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = self.nodes[i].inputs.iter().any(|v| depends[v.0]);
            }
        }

        let mut found: Vec<Option<Tensor>> = vec![None; targets.len()];
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if depends[output.0] {
            grads[output.0] = Some(seed.clone().with_precision(out_value.precision().join(seed.precision())));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if slot[i] != usize::MAX {
                found[slot[i]] = Some(g.clone());
            }
            if node.inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|v| depends[v.0]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = rules::vjp(&node.op, &xs, &node.value, &node.saved, &g, &need)?;
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    empty => *empty = Some(gi),
                }
            }
        }

        let mut result = Vec::with_capacity(targets.len());
        for t in targets {
            let g = if t.0 < n { found[slot[t.0]].clone() } else { None };
            result.push(g.unwrap_or_else(|| Tensor::zeros(self.nodes[t.0].value.shape())));
        }
        Ok(result)
    }

    /// Gradients for every named leaf, keyed by name. Leaves the output does
    /// not depend on receive zeros.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let named: Vec<(Var, String)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name: Some(name) } => Some((Var(i), name.clone())),
                _ => None,
            })
            .collect();
        let vars: Vec<Var> = named.iter().map(|(v, _)| *v).collect();
        let grads = self.grad_wrt(output, seed, &vars)?;
        let mut out = BTreeMap::new();
        for ((_, name), g) in named.into_iter().zip(grads) {
            if out.insert(name.clone(), g).is_some() {
                return Err(Error::Argument(format!("parameter `{name}` recorded twice")));
            }
        }
        Ok(out)
    }

    /// `cotangent^T (d output / d wrt)` for the selected nodes only.
    pub fn vjp(&self, output: Var, cotangent: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.grad_wrt(output, cotangent, wrt)
    }
}

pub(crate) fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Records `f` applied to `inputs` on a fresh tape. The returned outputs are
/// the values of the vars `f` returns.
pub fn record<F>(inputs: &[Tensor], f: F) -> Result<(Vec<Tensor>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let values = outs.iter().map(|v| tape.value(*v).clone()).collect();
    tape.set_outputs(outs);
    Ok((values, tape))
}

/// Reverse pass from the tape's first output.
pub fn backward(tape: &Tape, seed: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let out = *tape.outputs().first().ok_or_else(|| Error::Argument("tape has no outputs".into()))?;
    tape.backward(out, seed)
}

/// VJP from the tape's first output.
pub fn vjp(tape: &Tape, cotangent: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
    let out = *tape.outputs().first().ok_or_else(|| Error::Argument("tape has no outputs".into()))?;
    tape.vjp(out, cotangent, wrt)
}

#[cfg(test)]
mod tests;
