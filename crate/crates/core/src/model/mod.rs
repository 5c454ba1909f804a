//! The interface-chained language model and its dense residual baseline.
//!
//! Tokens are embedded once into a canvas `[B, L, D]` that every region
//! reads. Region `k` sees the rest of the network only through the interface
//! state `m_k: [B, r]`:
//!
//! ```text
//! x      = canvas + Dec_k(m_k)            (broadcast over positions)
//! x      = layers_k(x)
//! m_{k+1} = LN(m_k + alpha_k * Enc_k(mean_pool(x)))
//! ```
//!
//! The head decodes `m_K` into the canvas the same way, normalises and
//! projects to the vocabulary.

mod audit;
mod config;
pub(crate) mod graph;
mod params;

pub use audit::{audit_details, separator_audit, AuditReport};
pub use config::{Backend, LayerKind, ModelConfig};
pub use params::{classify, region_of, ParamClass, ParamCounts, ParamStore, ALPHA_INIT, HEAD_INIT_STD};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use graph::Binder;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, DetRng, Tensor};

/// A batch of `batch` sequences of `len` tokens with next-token targets,
/// both row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Arc<Vec<usize>>,
    pub targets: Arc<Vec<usize>>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Cuts `batch` windows of `len + 1` tokens starting at `starts`.
    pub fn from_windows(stream: &[u8], starts: &[usize], len: usize) -> Result<Batch> {
        let mut tokens = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            if s + len + 1 > stream.len() {
                return Err(Error::Data(format!(
                    "window at {s} of length {} overruns stream of {}",
                    len + 1,
                    stream.len()
                )));
            }
            tokens.extend(stream[s..s + len].iter().map(|&b| b as usize));
            targets.extend(stream[s + 1..s + len + 1].iter().map(|&b| b as usize));
        }
        Ok(Batch { tokens: Arc::new(tokens), targets: Arc::new(targets), batch: starts.len(), len })
    }

    /// Uniformly random tokens; used for probes and parity trials.
    pub fn random(vocab: usize, batch: usize, len: usize, rng: &mut DetRng) -> Batch {
        let n = batch * (len + 1);
        let stream: Vec<usize> = (0..n).map(|_| rng.below(vocab)).collect();
        let mut tokens = Vec::with_capacity(batch * len);
        let mut targets = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let row = &stream[b * (len + 1)..(b + 1) * (len + 1)];
            tokens.extend_from_slice(&row[..len]);
            targets.extend_from_slice(&row[1..]);
        }
        Batch { tokens: Arc::new(tokens), targets: Arc::new(targets), batch, len }
    }
}

/// Boundary values from which region `k` can be rebuilt in isolation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub region: usize,
    pub m_in: Tensor,
    /// `m_{k+1}` as produced by the forward pass; replays must match it.
    pub m_out: Tensor,
    pub canvas: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: f64,
    pub logits: Tensor,
    pub caches: Vec<ForwardCache>,
    /// `m_0 ..= m_K`; empty for the dense variant.
    pub chain: Vec<Tensor>,
    pub canvas: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Interface,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wiring {
    Bounded,
    /// Region `k`'s final activation is added to region `k + 1`'s input.
    Bypass,
}

/// A recorded region sub-graph with handles to its boundary nodes.
pub(crate) struct RegionTape {
    pub tape: Tape,
    pub m_in: Var,
    pub canvas: Var,
    pub m_out: Var,
    pub params: Vec<(String, Var)>,
}

/// A recorded loss head.
pub(crate) struct HeadTape {
    pub tape: Tape,
    pub m_in: Var,
    pub canvas: Var,
    pub loss: Var,
    pub params: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    variant: Variant,
    wiring: Wiring,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let params = ParamStore::init_interface(&config);
        Ok(Model { config, params, variant: Variant::Interface, wiring: Wiring::Bounded })
    }

    /// The same layer stack wired as a plain residual network.
    pub fn dense(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let params = ParamStore::init_dense(&config);
        Ok(Model { config, params, variant: Variant::Dense, wiring: Wiring::Bounded })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let variant = if params.get("init.proj").is_ok() { Variant::Interface } else { Variant::Dense };
        let expected = match variant {
            Variant::Interface => ParamStore::init_interface(&config),
            Variant::Dense => ParamStore::init_dense(&config),
        };
        for (name, t) in expected.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!("parameter `{name}` has the wrong shape")));
            }
        }
        if expected.len() != params.len() {
            return Err(Error::Format("unexpected parameters in checkpoint".into()));
        }
        Ok(Model { config, params, variant, wiring: Wiring::Bounded })
    }

    /// Test fixture: adds each region's final activation to the next region's
    /// input, breaking the bounded-interface property.
    #[doc(hidden)]
    pub fn with_bypass_edge(mut self) -> Model {
        self.wiring = Wiring::Bypass;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn param_counts(&self) -> ParamCounts {
        self.params.counts()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(&self.config, path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (config, params) = ParamStore::load(path)?;
        Model::from_parts(config, params)
    }

    fn require_interface(&self, what: &str) -> Result<()> {
        match self.variant {
            Variant::Interface => Ok(()),
            Variant::Dense => Err(Error::Argument(format!("{what} needs the interface variant"))),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.tokens.len() != batch.batch * batch.len || batch.targets.len() != batch.tokens.len() {
            return Err(Error::dim("batch", "tokens and targets must both be batch * len"));
        }
        if batch.batch == 0 || batch.len == 0 {
            return Err(Error::EmptyInput("batch"));
        }
        Ok(())
    }

    /// Embedding lookup `[B, L] -> [B, L, D]`.
    pub fn embed_tokens(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor> {
        tensor::gather(self.params.get("embed")?, tokens, batch, len)
    }

    pub(crate) fn record_init(&self, canvas: &Tensor) -> Result<(Tape, Var, Var, Vec<(String, Var)>)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let c = tape.input(canvas.clone());
        let m0 = graph::init_state(&mut tape, &mut b, c)?;
        Ok((tape, c, m0, b.bound()))
    }

    /// `m_0 = mean_pool(canvas) init.proj`, shape `[B, r]`.
    pub fn init_interface(&self, canvas: &Tensor) -> Result<Tensor> {
        self.require_interface("init_interface")?;
        let (tape, _, m0, _) = self.record_init(canvas)?;
        Ok(tape.value(m0).clone())
    }

    fn check_state(&self, m: &Tensor, canvas: &Tensor) -> Result<()> {
        let b = canvas.shape().first().copied().unwrap_or(0);
        if m.shape() != [b, self.config.rank] {
            return Err(Error::dim(
                "region_forward",
                format!("interface state {:?}, expected [{b}, {}]", m.shape(), self.config.rank),
            ));
        }
        Ok(())
    }

    /// Records region `k` on a fresh tape with `m` and `canvas` as unnamed
    /// leaves and the region's parameters as named leaves.
    pub(crate) fn record_region(
        &self,
        k: usize,
        m: &Tensor,
        canvas: &Tensor,
        on_read: Option<&(dyn Fn(&str) + Sync)>,
    ) -> Result<RegionTape> {
        if k >= self.config.regions {
            return Err(Error::Argument(format!("region {k} out of range")));
        }
        self.check_state(m, canvas)?;
        let mut tape = Tape::new();
        let mut b = match on_read {
            Some(f) => Binder::observed(&self.params, f),
            None => Binder::new(&self.params),
        };
        let canvas_v = tape.input(canvas.clone());
        let m_in = tape.input(m.clone());
        let (m_out, _) = graph::region(&mut tape, &mut b, k, m_in, canvas_v, &self.config, None)?;
        Ok(RegionTape { tape, m_in, canvas: canvas_v, m_out, params: b.bound() })
    }

    pub(crate) fn record_head(
        &self,
        m: &Tensor,
        canvas: &Tensor,
        targets: &Arc<Vec<usize>>,
        on_read: Option<&(dyn Fn(&str) + Sync)>,
    ) -> Result<HeadTape> {
        self.check_state(m, canvas)?;
        let mut tape = Tape::new();
        let mut b = match on_read {
            Some(f) => Binder::observed(&self.params, f),
            None => Binder::new(&self.params),
        };
        let canvas_v = tape.input(canvas.clone());
        let m_in = tape.input(m.clone());
        let logits = graph::head(&mut tape, &mut b, m_in, canvas_v, &self.config)?;
        let loss = tape.cross_entropy(logits, targets.clone())?;
        Ok(HeadTape { tape, m_in, canvas: canvas_v, loss, params: b.bound() })
    }

    /// One region transition `m_k -> m_{k+1}` and the cache to rebuild it.
    pub fn region_forward(&self, k: usize, m: &Tensor, canvas: &Arc<Tensor>) -> Result<(Tensor, ForwardCache)> {
        self.require_interface("region_forward")?;
        let rt = self.record_region(k, m, canvas, None)?;
        let m_out = rt.tape.value(rt.m_out).clone();
        let cache = ForwardCache { region: k, m_in: m.clone(), m_out: m_out.clone(), canvas: canvas.clone() };
        Ok((m_out, cache))
    }

    /// Applies region `k`'s layer stack to an activation `[B, L, D]`.
    pub fn phi(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let mut v = tape.input(x.clone());
        for l in 0..self.config.layers_in(k) {
            let prefix = match self.variant {
                Variant::Interface => format!("region{k}.layer{l}"),
                Variant::Dense => format!("layer{}", k * self.config.layers_per_region + l),
            };
            v = graph::layer(&mut tape, &mut b, &prefix, self.config.kind_of(k), v, &self.config)?;
        }
        Ok(tape.value(v).clone())
    }

    /// Runs the full model. For the interface variant the chain is computed
    /// region by region and a cache is kept for every region.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let canvas = Arc::new(self.embed_tokens(&batch.tokens, batch.batch, batch.len)?);
        match self.variant {
            Variant::Dense => {
                let mut tape = Tape::new();
                let mut b = Binder::new(&self.params);
                let c = tape.input((*canvas).clone());
                let logits = graph::dense(&mut tape, &mut b, c, &self.config)?;
                let loss = tape.cross_entropy(logits, batch.targets.clone())?;
                Ok(ForwardPass {
                    loss: tape.value(loss).data()[0],
                    logits: tape.value(logits).clone(),
                    caches: vec![],
                    chain: vec![],
                    canvas,
                })
            }
            Variant::Interface => {
                if self.wiring == Wiring::Bypass {
                    return self.forward_full_graph(batch, canvas);
                }
                let mut chain = vec![self.init_interface(&canvas)?];
                let mut caches = Vec::with_capacity(self.config.regions);
                for k in 0..self.config.regions {
                    let (next, cache) = self.region_forward(k, &chain[k], &canvas)?;
                    chain.push(next);
                    caches.push(cache);
                }
                let mut tape = Tape::new();
                let mut b = Binder::new(&self.params);
                let c = tape.input((*canvas).clone());
                let m = tape.input(chain[self.config.regions].clone());
                let logits = graph::head(&mut tape, &mut b, m, c, &self.config)?;
                let loss = tape.cross_entropy(logits, batch.targets.clone())?;
                Ok(ForwardPass {
                    loss: tape.value(loss).data()[0],
                    logits: tape.value(logits).clone(),
                    caches,
                    chain,
                    canvas,
                })
            }
        }
    }

    /// Forward on a single tape; the only path that honours the bypass wiring.
    fn forward_full_graph(&self, batch: &Batch, canvas: Arc<Tensor>) -> Result<ForwardPass> {
        let full = self.record_full(batch, None)?;
        let chain: Vec<Tensor> = full.chain.iter().map(|v| full.tape.value(*v).clone()).collect();
        let caches = (0..self.config.regions)
            .map(|k| ForwardCache {
                region: k,
                m_in: chain[k].clone(),
                m_out: chain[k + 1].clone(),
                canvas: canvas.clone(),
            })
            .collect();
        Ok(ForwardPass {
            loss: full.tape.value(full.loss).data()[0],
            logits: full.tape.value(full.logits).clone(),
            caches,
            chain,
            canvas,
        })
    }

    /// Records the whole model on one tape, embedding included. With
    /// `detach_at = Some(k)`, `m_k` enters the rest of the graph as a fresh
    /// constant leaf.
    fn record_full(&self, batch: &Batch, detach_at: Option<usize>) -> Result<FullTape> {
        self.check_batch(batch)?;
        let c = &self.config;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let embed = b.get(&mut tape, "embed")?;
        let canvas = tape.gather(embed, batch.tokens.clone(), batch.batch, batch.len)?;
        let (logits, chain) = match self.variant {
            Variant::Dense => (graph::dense(&mut tape, &mut b, canvas, c)?, vec![]),
            Variant::Interface => {
                let mut m = graph::init_state(&mut tape, &mut b, canvas)?;
                let mut chain = vec![m];
                let mut prev_x = None;
                for k in 0..c.regions {
                    if detach_at == Some(k) {
                        let value = tape.value(m).clone();
                        m = tape.input(value);
                    }
                    let bypass = if self.wiring == Wiring::Bypass { prev_x } else { None };
                    let (next, x) = graph::region(&mut tape, &mut b, k, m, canvas, c, bypass)?;
                    prev_x = Some(x);
                    m = next;
                    chain.push(m);
                }
                if detach_at == Some(c.regions) {
                    let value = tape.value(m).clone();
                    m = tape.input(value);
                }
                (graph::head(&mut tape, &mut b, m, canvas, c)?, chain)
            }
        };
        let loss = tape.cross_entropy(logits, batch.targets.clone())?;
        Ok(FullTape { tape, logits, loss, chain })
    }

    /// Reference gradients: one tape over the whole model, one reverse pass.
    pub fn oracle_gradients(&self, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self.oracle_gradients_detached(batch, None)
    }

    pub(crate) fn oracle_gradients_detached(
        &self,
        batch: &Batch,
        detach_at: Option<usize>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let full = self.record_full(batch, detach_at)?;
        let seed = Tensor::scalar(1.0).with_precision(self.config.precision);
        let grads = full.tape.backward(full.loss, &seed)?;
        Ok((full.tape.value(full.loss).data()[0], grads))
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.forward(batch)?.loss)
    }
}

struct FullTape {
    tape: Tape,
    logits: Var,
    loss: Var,
    chain: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(backend: Backend) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            seq_len: 8,
            rank: 4,
            regions: 3,
            mlp_width: 32,
            heads: 2,
            ssm_state: 4,
            backend,
            ..ModelConfig::default()
        }
    }

    fn batch(c: &ModelConfig, seed: u64) -> Batch {
        Batch::random(c.vocab_size, 2, c.seq_len, &mut DetRng::new(seed))
    }

    #[test]
    fn canvas_shape_and_prefix_sharing() {
        let m = Model::new(small(Backend::Mlp)).unwrap();
        let x = m.embed_tokens(&[5, 5, 7, 1, 2, 3], 2, 3).unwrap();
        assert_eq!(x.shape(), &[2, 3, 16]);
        assert_eq!(x.row(0), x.row(1));
        let y = m.embed_tokens(&[5, 5, 9], 1, 3).unwrap();
        assert_eq!(&x.data()[..32], &y.data()[..32]);
        assert!(matches!(m.embed_tokens(&[300], 1, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn init_interface_cases() {
        let m = Model::new(small(Backend::Mlp)).unwrap();
        let zero = m.init_interface(&Tensor::zeros(&[2, 8, 16])).unwrap();
        assert_eq!(zero.shape(), &[2, 4]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let canvas = m.embed_tokens(&batch(m.config(), 1).tokens, 2, 8).unwrap();
        let hand = tensor::matmul(&tensor::mean_pool(&canvas).unwrap(), m.params().get("init.proj").unwrap()).unwrap();
        assert_eq!(m.init_interface(&canvas).unwrap(), hand);
    }

    #[test]
    fn zero_alpha_reduces_to_layer_norm() {
        let mut m = Model::new(small(Backend::Attention)).unwrap();
        m.params_mut().set("region1.alpha", Tensor::scalar(0.0)).unwrap();
        let mstate = Tensor::randn(&[2, 4], 1.0, &mut DetRng::new(3));
        let canvas = Arc::new(m.embed_tokens(&batch(m.config(), 2).tokens, 2, 8).unwrap());
        let (next, _) = m.region_forward(1, &mstate, &canvas).unwrap();
        assert_eq!(next, tensor::layer_norm(&mstate, 1e-5));
    }

    #[test]
    fn region_forward_rejects_wrong_rank() {
        let m = Model::new(small(Backend::Mlp)).unwrap();
        let canvas = Arc::new(Tensor::zeros(&[2, 8, 16]));
        let err = m.region_forward(0, &Tensor::zeros(&[2, 5]), &canvas).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn single_region_chain_matches_manual_composition() {
        let c = ModelConfig { regions: 1, ..small(Backend::DiagSsm) };
        let m = Model::new(c).unwrap();
        let bt = batch(m.config(), 4);
        let fp = m.forward(&bt).unwrap();
        assert_eq!(fp.chain.len(), 2);
        let canvas = Arc::new(m.embed_tokens(&bt.tokens, 2, 8).unwrap());
        let m0 = m.init_interface(&canvas).unwrap();
        let (m1, _) = m.region_forward(0, &m0, &canvas).unwrap();
        assert_eq!(fp.chain[1], m1);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m = Model::new(ModelConfig { seq_len: 32, ..ModelConfig::default() }).unwrap();
        let bt = Batch::random(256, 2, 32, &mut DetRng::new(5));
        let loss = m.loss(&bt).unwrap();
        assert!((loss - 256f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn identical_regions_give_identical_outputs() {
        let mut m = Model::new(small(Backend::Mlp)).unwrap();
        let names: Vec<String> = m.params().names().filter(|n| n.starts_with("region0.")).cloned().collect();
        for n in names {
            let v = m.params().get(&n).unwrap().clone();
            m.params_mut().set(&n.replacen("region0.", "region1.", 1), v).unwrap();
        }
        let mstate = Tensor::randn(&[2, 4], 1.0, &mut DetRng::new(6));
        let canvas = Arc::new(Tensor::randn(&[2, 8, 16], 1.0, &mut DetRng::new(7)));
        assert_eq!(m.region_forward(0, &mstate, &canvas).unwrap().0, m.region_forward(1, &mstate, &canvas).unwrap().0);
    }

    #[test]
    fn mlp_with_zero_weights_is_identity() {
        let mut m = Model::new(small(Backend::Mlp)).unwrap();
        for w in ["w1", "w2"] {
            let name = format!("region0.layer0.mlp.{w}");
            let shape = m.params().get(&name).unwrap().shape().to_vec();
            m.params_mut().set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::randn(&[2, 8, 16], 1.0, &mut DetRng::new(8));
        assert_eq!(m.phi(0, &x).unwrap(), x);
    }

    #[test]
    fn ssm_with_zero_decay_has_no_temporal_mixing() {
        let mut m = Model::new(small(Backend::DiagSsm)).unwrap();
        m.params_mut().set("region0.layer0.ssm.decay", Tensor::zeros(&[16, 4])).unwrap();
        let x = Tensor::randn(&[1, 8, 16], 1.0, &mut DetRng::new(9));
        let full = m.phi(0, &x).unwrap();
        for t in 0..8 {
            let single = x.slice_batch(0, 1).reshape(&[8, 16]).unwrap();
            let row = Tensor::new(vec![1, 1, 16], single.row(t).to_vec()).unwrap();
            let alone = m.phi(0, &row).unwrap();
            assert_eq!(alone.data(), full.row(t));
        }
    }

    #[test]
    fn interface_param_count_grows_with_regions() {
        let count = |k: usize| Model::new(ModelConfig { regions: k, ..ModelConfig::default() }).unwrap().param_counts();
        let (a, b) = (count(2), count(4));
        let per_region = 2 * 64 * 64 + 2 * 8 * 64 + 1;
        assert_eq!(b.interface - a.interface, 2 * per_region);
        assert_eq!(a.embed_head, b.embed_head);
        let total: usize = Model::new(ModelConfig::default()).unwrap().params().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(count(4).total(), total);
    }

    #[test]
    fn dense_variant_has_no_interface_params() {
        let m = Model::dense(small(Backend::Attention)).unwrap();
        assert_eq!(m.param_counts().interface, 0);
        let bt = batch(m.config(), 10);
        assert!(m.forward(&bt).unwrap().loss.is_finite());
        assert!(m.init_interface(&Tensor::zeros(&[1, 8, 16])).is_err());
    }
}
