//! Structural check that regions communicate only through interface states.

use serde::Serialize;

use super::{region_of, Batch, Model, Variant};
use crate::autodiff::bit_equal;
use crate::error::Result;
use crate::tensor::{DetRng, Tensor};

/// Outcome of each audit check.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    /// Rebuilding each region from its cache reproduces `m_{k+1}` bitwise.
    pub replay_ok: bool,
    /// Perturbing region `j` leaves `m_0..=m_j` and the canvas untouched.
    pub perturbation_ok: bool,
    /// Cutting the chain at `m_k` leaves no gradient in earlier regions or
    /// in the initial projection.
    pub detach_ok: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.replay_ok && self.perturbation_ok && self.detach_ok
    }
}

/// Runs the audit on a deterministic probe batch and reports each check.
pub fn audit_details(model: &Model) -> Result<AuditReport> {
    if model.variant() == Variant::Dense {
        return Ok(AuditReport::default());
    }
    let c = model.config();
    let mut rng = DetRng::derive(c.seed, "separator-audit");
    let batch = Batch::random(c.vocab_size, 2, c.seq_len, &mut rng);
    let base = model.forward(&batch)?;

    let mut replay_ok = true;
    for cache in &base.caches {
        let rt = model.record_region(cache.region, &cache.m_in, &cache.canvas, None)?;
        replay_ok &= bit_equal(rt.tape.value(rt.m_out), &cache.m_out);
    }

    let mut perturbation_ok = true;
    for j in 0..c.regions {
        let mut perturbed = model.clone();
        let prefix = format!("region{j}.");
        for (name, t) in perturbed.params_mut().iter_mut() {
            if name.starts_with(&prefix) {
                let noise = Tensor::randn(t.shape(), 1e-2, &mut rng);
                for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v += n;
                }
            }
        }
        let fp = perturbed.forward(&batch)?;
        perturbation_ok &= bit_equal(&fp.canvas, &base.canvas);
        for k in 0..=j {
            perturbation_ok &= bit_equal(&fp.chain[k], &base.chain[k]);
        }
    }

    let mut detach_ok = true;
    for k in 1..=c.regions {
        let (_, grads) = model.oracle_gradients_detached(&batch, Some(k))?;
        for (name, g) in &grads {
            let upstream = name == "init.proj" || region_of(name).is_some_and(|j| j < k);
            if upstream && g.data().iter().any(|&v| v != 0.0) {
                detach_ok = false;
            }
        }
    }

    Ok(AuditReport { replay_ok, perturbation_ok, detach_ok })
}

/// True iff the model's regions interact only through the interface chain.
pub fn separator_audit(model: &Model) -> Result<bool> {
    Ok(audit_details(model)?.passed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backend, ModelConfig};

    fn cfg(backend: Backend) -> ModelConfig {
        ModelConfig { d_model: 16, seq_len: 8, rank: 4, regions: 3, mlp_width: 32, heads: 2, ssm_state: 4, backend, ..ModelConfig::default() }
    }

    #[test]
    fn well_formed_models_pass() {
        for b in [Backend::Mlp, Backend::Attention, Backend::DiagSsm, Backend::default_hybrid(3)] {
            let m = Model::new(cfg(b)).unwrap();
            assert!(separator_audit(&m).unwrap());
        }
    }

    #[test]
    fn bypass_fixture_fails() {
        let m = Model::new(cfg(Backend::Mlp)).unwrap().with_bypass_edge();
        let r = audit_details(&m).unwrap();
        assert!(!r.replay_ok);
        assert!(!r.detach_ok);
        assert!(!r.passed());
    }
}
