use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Layer type used inside a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Mlp,
    Attention,
    DiagSsm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Mlp => "mlp",
            LayerKind::Attention => "attention",
            LayerKind::DiagSsm => "diag_ssm",
        }
    }
}

/// Backend for the whole stack. `Hybrid` lists one kind per region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Mlp,
    Attention,
    DiagSsm,
    Hybrid(Vec<LayerKind>),
}

impl Backend {
    /// Parses `mlp`, `attention`, `diag_ssm`, or `hybrid:<kind>,<kind>,...`.
    pub fn parse(s: &str) -> Result<Backend> {
        let kind = |k: &str| match k.trim() {
            "mlp" => Ok(LayerKind::Mlp),
            "attention" => Ok(LayerKind::Attention),
            "diag_ssm" | "ssm" => Ok(LayerKind::DiagSsm),
            other => Err(Error::Config(format!("unknown backend kind `{other}`"))),
        };
        if let Some(list) = s.strip_prefix("hybrid:") {
            return Ok(Backend::Hybrid(list.split(',').map(kind).collect::<Result<_>>()?));
        }
        Ok(match kind(s)? {
            LayerKind::Mlp => Backend::Mlp,
            LayerKind::Attention => Backend::Attention,
            LayerKind::DiagSsm => Backend::DiagSsm,
        })
    }

    /// The hybrid schedule used by the test matrix: state-space regions with
    /// every fourth region using attention.
    pub fn default_hybrid(regions: usize) -> Backend {
        Backend::Hybrid(
            (0..regions)
                .map(|k| if k % 4 == 3 { LayerKind::Attention } else { LayerKind::DiagSsm })
                .collect(),
        )
    }

    pub fn label(&self) -> String {
        match self {
            Backend::Mlp => "mlp".into(),
            Backend::Attention => "attention".into(),
            Backend::DiagSsm => "diag_ssm".into(),
            Backend::Hybrid(_) => "hybrid".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model width D.
    pub d_model: usize,
    /// Sequence length L.
    pub seq_len: usize,
    /// Interface rank r.
    pub rank: usize,
    /// Region count K.
    pub regions: usize,
    pub layers_per_region: usize,
    /// Total layer count when the final region is truncated. `None` means
    /// every region has `layers_per_region` layers.
    pub total_layers: Option<usize>,
    pub backend: Backend,
    pub heads: usize,
    pub ssm_state: usize,
    pub mlp_width: usize,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            seq_len: 128,
            rank: 8,
            regions: 4,
            layers_per_region: 1,
            total_layers: None,
            backend: Backend::Mlp,
            heads: 4,
            ssm_state: 16,
            mlp_width: 128,
            eps: 1e-5,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// Config with `total_layers` split into regions of `region_size`, the
    /// last region taking the remainder.
    pub fn with_depth(mut self, total_layers: usize, region_size: usize) -> Self {
        self.layers_per_region = region_size;
        self.regions = total_layers.div_ceil(region_size.max(1));
        self.total_layers = Some(total_layers);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.rank == 0 || self.regions == 0 {
            return fail(format!("rank and regions must be >= 1 (r={}, K={})", self.rank, self.regions));
        }
        if self.rank > self.d_model {
            return fail(format!("rank {} exceeds model width {}", self.rank, self.d_model));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.seq_len == 0 || self.mlp_width == 0 {
            return fail("vocab_size, d_model, seq_len and mlp_width must be positive".into());
        }
        if self.layers_per_region == 0 {
            return fail("layers_per_region must be >= 1".into());
        }
        if let Some(total) = self.total_layers {
            if total == 0 || total.div_ceil(self.layers_per_region) != self.regions {
                return fail(format!(
                    "{total} layers in regions of {} gives {} regions, config has {}",
                    self.layers_per_region,
                    total.div_ceil(self.layers_per_region),
                    self.regions
                ));
            }
        }
        if let Backend::Hybrid(kinds) = &self.backend {
            if kinds.len() != self.regions {
                return fail(format!("hybrid schedule has {} entries for {} regions", kinds.len(), self.regions));
            }
        }
        if self.uses(LayerKind::Attention) && (self.heads == 0 || self.d_model % self.heads != 0) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.uses(LayerKind::DiagSsm) && self.ssm_state == 0 {
            return fail("ssm_state must be >= 1".into());
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    fn uses(&self, kind: LayerKind) -> bool {
        (0..self.regions).any(|k| self.kind_of(k) == kind)
    }

    pub fn kind_of(&self, region: usize) -> LayerKind {
        match &self.backend {
            Backend::Mlp => LayerKind::Mlp,
            Backend::Attention => LayerKind::Attention,
            Backend::DiagSsm => LayerKind::DiagSsm,
            Backend::Hybrid(kinds) => kinds[region],
        }
    }

    /// Number of layers in region `k`.
    pub fn layers_in(&self, region: usize) -> usize {
        match self.total_layers {
            Some(total) if region + 1 == self.regions => total - region * self.layers_per_region,
            _ => self.layers_per_region,
        }
    }

    pub fn total_layer_count(&self) -> usize {
        (0..self.regions).map(|k| self.layers_in(k)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_final_region() {
        let c = ModelConfig::default().with_depth(7, 2);
        assert_eq!(c.regions, 4);
        assert_eq!((0..4).map(|k| c.layers_in(k)).collect::<Vec<_>>(), vec![2, 2, 2, 1]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = ModelConfig { rank: 65, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { backend: Backend::Hybrid(vec![LayerKind::Mlp]), ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { rank: 0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn backend_json_and_parse() {
        let b = Backend::default_hybrid(4);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"hybrid":["diag_ssm","diag_ssm","diag_ssm","attention"]}"#);
        assert_eq!(serde_json::from_str::<Backend>(r#""mlp""#).unwrap(), Backend::Mlp);
        assert_eq!(Backend::parse("hybrid:mlp,attention").unwrap(), Backend::Hybrid(vec![LayerKind::Mlp, LayerKind::Attention]));
        assert!(Backend::parse("conv").is_err());
    }
}
