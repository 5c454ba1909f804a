use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use super::config::{LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DetRng, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LBICKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Initial value of every per-region residual scale.
pub const ALPHA_INIT: f64 = 0.1;
/// Std of the vocabulary projection, small so initial logits are near uniform.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Which accounting bucket a parameter falls into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Backend,
    Interface,
    EmbedHead,
}

pub fn classify(name: &str) -> ParamClass {
    if name.starts_with("layer") || name.contains(".layer") {
        ParamClass::Backend
    } else if name == "embed" || name == "head.proj" {
        ParamClass::EmbedHead
    } else {
        ParamClass::Interface
    }
}

/// Region index of a `region{k}.` parameter.
pub fn region_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("region")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub backend: usize,
    pub interface: usize,
    pub embed_head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backend + self.interface + self.embed_head
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

enum Init {
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    Const(f64),
}

fn layer_specs(prefix: &str, kind: LayerKind, c: &ModelConfig, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let (d, x, n) = (c.d_model, c.mlp_width, c.ssm_state);
    let fan = |f: usize| Init::Normal { std: 1.0 / (f as f64).sqrt() };
    match kind {
        LayerKind::Mlp => {}
        LayerKind::Attention => {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{prefix}.attn.{w}"), vec![d, d], fan(d)));
            }
        }
        LayerKind::DiagSsm => {
            out.push((format!("{prefix}.ssm.wg"), vec![d, d], fan(d)));
            out.push((format!("{prefix}.ssm.wb"), vec![d, n], fan(d)));
            out.push((format!("{prefix}.ssm.wc"), vec![d, n], fan(d)));
            out.push((format!("{prefix}.ssm.decay"), vec![d, n], Init::Uniform { lo: 0.5, hi: 0.95 }));
            out.push((format!("{prefix}.ssm.wo"), vec![d, d], fan(d)));
        }
    }
    out.push((format!("{prefix}.mlp.w1"), vec![d, x], fan(d)));
    out.push((format!("{prefix}.mlp.w2"), vec![x, d], fan(x)));
}

fn interface_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, r) = (c.d_model, c.rank);
    let fan = |f: usize| Init::Normal { std: 1.0 / (f as f64).sqrt() };
    let mut out = vec![
        ("embed".to_string(), vec![c.vocab_size, d], Init::Normal { std: 1.0 }),
        ("init.proj".to_string(), vec![d, r], fan(d)),
    ];
    for k in 0..c.regions {
        out.push((format!("region{k}.dec.w1"), vec![r, d], fan(r)));
        out.push((format!("region{k}.dec.w2"), vec![d, d], fan(d)));
        out.push((format!("region{k}.enc.w1"), vec![d, d], fan(d)));
        out.push((format!("region{k}.enc.w2"), vec![d, r], fan(d)));
        out.push((format!("region{k}.alpha"), vec![1], Init::Const(ALPHA_INIT)));
        for l in 0..c.layers_in(k) {
            layer_specs(&format!("region{k}.layer{l}"), c.kind_of(k), c, &mut out);
        }
    }
    out.push(("head.dec.w1".to_string(), vec![r, d], fan(r)));
    out.push(("head.dec.w2".to_string(), vec![d, d], fan(d)));
    out.push(("head.proj".to_string(), vec![d, c.vocab_size], Init::Normal { std: HEAD_INIT_STD }));
    out
}

fn dense_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = vec![("embed".to_string(), vec![c.vocab_size, c.d_model], Init::Normal { std: 1.0 })];
    let mut l = 0;
    for k in 0..c.regions {
        for _ in 0..c.layers_in(k) {
            layer_specs(&format!("layer{l}"), c.kind_of(k), c, &mut out);
            l += 1;
        }
    }
    out.push((
        "head.proj".to_string(),
        vec![c.d_model, c.vocab_size],
        Init::Normal { std: HEAD_INIT_STD },
    ));
    out
}

impl ParamStore {
    fn from_specs(specs: Vec<(String, Vec<usize>, Init)>, c: &ModelConfig) -> Self {
        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let mut rng = DetRng::derive(c.seed, &name);
                let t = match init {
                    Init::Normal { std } => Tensor::randn(&shape, std, &mut rng),
                    Init::Uniform { lo, hi } => {
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
                        Tensor::new(shape, data).expect("shape matches data")
                    }
                    Init::Const(v) => Tensor::full(&shape, v),
                };
                (name, t.with_precision(c.precision))
            })
            .collect();
        ParamStore { tensors }
    }

    /// Parameters of the interface-chained model. Each tensor draws from its
    /// own stream keyed by name, so adding a region does not reshuffle others.
    pub fn init_interface(c: &ModelConfig) -> Self {
        Self::from_specs(interface_specs(c), c)
    }

    /// Parameters of the dense residual baseline.
    pub fn init_dense(c: &ModelConfig) -> Self {
        Self::from_specs(dense_specs(c), c)
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (name, t) in &self.tensors {
            match classify(name) {
                ParamClass::Backend => c.backend += t.len(),
                ParamClass::Interface => c.interface += t.len(),
                ParamClass::EmbedHead => c.embed_head += t.len(),
            }
        }
        c
    }

    /// Writes magic, version, config JSON and every tensor in name order as
    /// little-endian f64.
    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(config)?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &s in t.shape() {
                buf.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(hlen)?)?;
        let n = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let nlen = r.u64()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.insert(name, Tensor::new(shape, data)?.with_precision(config.precision));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok((config, ParamStore { tensors }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
