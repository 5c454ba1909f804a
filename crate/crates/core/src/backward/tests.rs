use super::*;
use crate::autodiff::{compare_gradients, finite_difference_jacobian};
use crate::model::{Backend, ModelConfig};
use crate::tensor::{self, DetRng};

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

fn backends() -> Vec<Backend> {
    vec![Backend::Mlp, Backend::Attention, Backend::DiagSsm, Backend::default_hybrid(3)]
}

fn setup(backend: Backend, seed: u64) -> (Model, Batch) {
    let c = ModelConfig { seed, ..small(backend) };
    let batch = Batch::random(c.vocab_size, 2, c.seq_len, &mut DetRng::new(seed + 100));
    (Model::new(c).unwrap(), batch)
}

#[test]
fn parity_with_oracle_all_backends() {
    for b in backends() {
        let (model, batch) = setup(b.clone(), 1);
        let report = parity_trial(&model, &batch, &BackwardPlan::default()).unwrap();
        assert!(report.rel_l2_error < 1e-10, "{b:?}: {report:?}");
        assert!(report.cosine_similarity > 1.0 - 1e-12);
    }
}

#[test]
fn linear_fixture_jacobian_is_exact() {
    let a = Tensor::randn(&[5, 5], 1.0, &mut DetRng::new(2));
    let m = Tensor::randn(&[3, 5], 1.0, &mut DetRng::new(3));
    for c in [1, 2, 5] {
        let j = jacobian_of(&LinearRegion { a: a.clone() }, 0, &m, None, c).unwrap();
        for jb in &j.per_batch {
            assert_eq!(jb, &a);
        }
    }
    assert!(jacobian_of(&LinearRegion { a }, 0, &m, None, 6).is_err());
}

#[test]
fn chunking_is_bitwise_invariant_and_matches_fd() {
    for b in backends() {
        let (model, batch) = setup(b, 4);
        let fp = model.forward(&batch).unwrap();
        let cache = &fp.caches[1];
        let full = materialize_jacobian(&model, cache, &BackwardPlan::default()).unwrap();
        for c in [1, 2, 3] {
            let plan = BackwardPlan { chunk: Some(c), ..BackwardPlan::default() };
            assert_eq!(materialize_jacobian(&model, cache, &plan).unwrap(), full);
        }
        // batch element 1 through a single-sequence probe
        let single_canvas = std::sync::Arc::new(cache.canvas.slice_batch(1, 2));
        let m1 = cache.m_in.slice_batch(1, 2);
        let fd = finite_difference_jacobian(
            |v| {
                let (out, _) = model.region_forward(1, &v.reshape(&[1, 4])?, &single_canvas)?;
                out.reshape(&[4])
            },
            &m1.reshape(&[4]).unwrap(),
            1e-5,
        )
        .unwrap();
        for (x, y) in full.per_batch[1].data().iter().zip(fd.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn corrupted_cache_fails_integrity() {
    let (model, batch) = setup(Backend::Mlp, 5);
    let fp = model.forward(&batch).unwrap();
    let mut cache = fp.caches[0].clone();
    cache.m_out.data_mut()[0] += 1e-12;
    let err = materialize_jacobian(&model, &cache, &BackwardPlan::default()).unwrap_err();
    assert!(matches!(err, Error::Integrity { region: 0, .. }));
}

#[test]
fn zero_adjoint_gives_zero_region_gradients() {
    let (model, batch) = setup(Backend::Attention, 6);
    let fp = model.forward(&batch).unwrap();
    let g = phase3_region_backward(&model, &fp.caches[2], &Tensor::zeros(&[2, 4])).unwrap();
    assert!(g.params.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.canvas.data().iter().all(|&v| v == 0.0));
}

#[test]
fn alpha_gradient_matches_isolated_region_oracle() {
    let (model, batch) = setup(Backend::Mlp, 7);
    let fp = model.forward(&batch).unwrap();
    let cache = &fp.caches[1];
    let seed = Tensor::randn(&[2, 4], 1.0, &mut DetRng::new(8));
    let g = phase3_region_backward(&model, cache, &seed).unwrap();
    // d m_{k+1} / d alpha by central differences on the isolated region
    let h = 1e-6;
    let alpha = model.params().get("region1.alpha").unwrap().data()[0];
    let shifted = |a: f64| {
        let mut m = model.clone();
        m.params_mut().set("region1.alpha", Tensor::scalar(a)).unwrap();
        m.region_forward(1, &cache.m_in, &cache.canvas).unwrap().0
    };
    let d = tensor::scale(&tensor::sub(&shifted(alpha + h), &shifted(alpha - h)).unwrap(), 0.5 / h);
    let expect: f64 = d.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum();
    assert!((g.params["region1.alpha"].data()[0] - expect).abs() < 1e-7);
}

#[test]
fn schedules_and_workers_agree_bitwise() {
    let (model, batch) = setup(Backend::default_hybrid(3), 9);
    let base = compute_gradients(&model, &batch, &BackwardPlan::default()).unwrap();
    for workers in [1, 2, 4] {
        for schedule in [Schedule::ThreePhase, Schedule::Streaming] {
            let plan = BackwardPlan { executor: Executor::with_workers(workers).unwrap(), schedule, ..BackwardPlan::default() };
            let g = compute_gradients(&model, &batch, &plan).unwrap();
            assert_eq!(g.params, base.params, "workers={workers} {schedule:?}");
            assert_eq!(g.interface_adjoints, base.interface_adjoints);
        }
    }
}

#[test]
fn serial_streaming_runs_forwards_first() {
    let (model, batch) = setup(Backend::Mlp, 10);
    let (_, report) = streaming_backward(&model, &batch, &BackwardPlan::default()).unwrap();
    assert!(report.overlapping_jacobians().is_empty());
    assert_eq!(report.spans.len(), 6);
}

#[test]
fn phases_touch_only_their_region() {
    let (model, batch) = setup(Backend::DiagSsm, 11);
    let fp = model.forward(&batch).unwrap();
    let log = AccessLog::new();
    let plan = BackwardPlan { executor: Executor::with_workers(2).unwrap(), ..BackwardPlan::default() };
    lbi_backward_observed(&model, &batch, &fp, &plan, Some(&log)).unwrap();
    assert!(!log.entries().is_empty());
    assert_eq!(log.cross_region(), vec![]);
}

#[test]
fn dense_model_is_rejected() {
    let c = small(Backend::Mlp);
    let model = Model::dense(c.clone()).unwrap();
    let batch = Batch::random(256, 1, 8, &mut DetRng::new(1));
    assert!(compute_gradients(&model, &batch, &BackwardPlan::default()).is_err());
}

#[test]
fn report_matches_itself_across_identical_runs() {
    let (model, batch) = setup(Backend::Mlp, 12);
    let a = parity_trial(&model, &batch, &BackwardPlan::default()).unwrap();
    let b = parity_trial(&model, &batch, &BackwardPlan::default()).unwrap();
    assert_eq!(a, b);
    let g = compute_gradients(&model, &batch, &BackwardPlan::default()).unwrap();
    assert_eq!(compare_gradients(&g.params, &g.params).unwrap().rel_l2_error, 0.0);
}
