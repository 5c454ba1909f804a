//! Interface backward against the full-graph oracle across configurations.

mod common;

use std::sync::Arc;

use lbi_core::autodiff::{compare_gradients, finite_difference_jacobian};
use lbi_core::backward::{
    compute_gradients, jacobian_of, lbi_backward, parity_suite, phase1_all, materialize_jacobian, BackwardPlan,
    LinearRegion, Schedule,
};
use lbi_core::model::{Backend, Batch, Model, ModelConfig};
use lbi_core::scan::{apply_adjoints, suffix_scan_sequential, Executor};
use lbi_core::{DetRng, Precision, Tensor};

#[test]
fn parity_across_backends_and_depths() {
    for regions in [1, 2, 5] {
        for backend in common::all_backends(regions) {
            let config = ModelConfig { regions, ..common::small(backend.clone()) };
            let summary = parity_suite(&config, 2, 2, 2, &BackwardPlan::default()).unwrap();
            assert!(summary.worst.rel_l2_error < 1e-10, "{backend:?} K={regions}: {:?}", summary.worst);
            assert!(summary.worst.cosine_similarity > 1.0 - 1e-12);
        }
    }
}

#[test]
fn parity_with_deeper_regions_and_truncation() {
    let config = common::small(Backend::Mlp).with_depth(5, 2);
    let model = Model::new(config).unwrap();
    let batch = Batch::random(256, 2, 12, &mut DetRng::new(3));
    let g = compute_gradients(&model, &batch, &BackwardPlan::default()).unwrap();
    let (_, oracle) = model.oracle_gradients(&batch).unwrap();
    assert!(compare_gradients(&g.params, &oracle).unwrap().rel_l2_error < 1e-10);
}

#[test]
fn f32_parity_is_loose_but_close() {
    for backend in common::all_backends(3) {
        let config = ModelConfig { precision: Precision::F32, ..common::small(backend) };
        let summary = parity_suite(&config, 2, 2, 2, &BackwardPlan::default()).unwrap();
        assert!(summary.worst.rel_l2_error < 1e-4, "{:?}", summary.worst);
    }
}

#[test]
fn region_gradients_match_oracle_restricted_to_region() {
    let model = Model::new(common::small(Backend::Attention)).unwrap();
    let batch = Batch::random(256, 2, 12, &mut DetRng::new(4));
    let g = compute_gradients(&model, &batch, &BackwardPlan::default()).unwrap();
    let (_, oracle) = model.oracle_gradients(&batch).unwrap();
    for (name, want) in oracle.iter().filter(|(n, _)| n.starts_with("region1.")) {
        let got = &g.params[name];
        let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12 * (1.0 + want.max_abs()), "{name}: {err}");
    }
}

#[test]
fn single_region_phase_one() {
    let config = ModelConfig { regions: 1, ..common::small(Backend::DiagSsm) };
    let model = Model::new(config).unwrap();
    let batch = Batch::random(256, 2, 12, &mut DetRng::new(5));
    let fp = model.forward(&batch).unwrap();
    let plan = BackwardPlan::default();
    let all = phase1_all(&model, &fp.caches, &plan).unwrap();
    assert_eq!(all, vec![materialize_jacobian(&model, &fp.caches[0], &plan).unwrap()]);
}

#[test]
fn identity_chain_keeps_adjoints_equal() {
    let js = vec![Tensor::eye(5); 6];
    let p = suffix_scan_sequential(&js, 5).unwrap();
    let terminal = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 0.0]);
    let adj = apply_adjoints(&p, &terminal).unwrap();
    assert!(adj.iter().all(|a| a == &terminal));
}

#[test]
fn linear_region_jacobian_for_every_chunk() {
    let a = Tensor::randn(&[6, 6], 1.0, &mut DetRng::new(6));
    let m = Tensor::randn(&[4, 6], 1.0, &mut DetRng::new(7));
    for c in 1..=6 {
        let j = jacobian_of(&LinearRegion { a: a.clone() }, 0, &m, None, c).unwrap();
        assert!(j.per_batch.iter().all(|jb| jb == &a));
    }
}

#[test]
fn jacobians_match_finite_differences_on_small_configs() {
    for backend in common::all_backends(3) {
        let model = Model::new(common::small(backend.clone())).unwrap();
        let batch = Batch::random(256, 2, 12, &mut DetRng::new(8));
        let fp = model.forward(&batch).unwrap();
        let js = phase1_all(&model, &fp.caches, &BackwardPlan::default()).unwrap();
        for (k, cache) in fp.caches.iter().enumerate() {
            for b in 0..2 {
                let canvas = Arc::new(cache.canvas.slice_batch(b, b + 1));
                let m = cache.m_in.slice_batch(b, b + 1).reshape(&[4]).unwrap();
                let fd = finite_difference_jacobian(
                    |v| model.region_forward(k, &v.reshape(&[1, 4])?, &canvas)?.0.reshape(&[4]),
                    &m,
                    1e-5,
                )
                .unwrap();
                let err = js[k].per_batch[b].data().iter().zip(fd.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(err < 1e-6, "{backend:?} region {k} element {b}: {err}");
            }
        }
    }
}

#[test]
fn every_plan_gives_the_same_gradients() {
    let model = Model::new(common::small(Backend::default_hybrid(3))).unwrap();
    let batch = Batch::random(256, 3, 12, &mut DetRng::new(9));
    let fp = model.forward(&batch).unwrap();
    let reference = lbi_backward(&model, &batch, &fp, &BackwardPlan::default()).unwrap();
    for chunk in [1, 2, 4] {
        for workers in [1, 3] {
            for schedule in [Schedule::ThreePhase, Schedule::Streaming] {
                for tree_threshold in [1, 4] {
                    let plan = BackwardPlan {
                        chunk: Some(chunk),
                        executor: Executor::with_workers(workers).unwrap(),
                        schedule,
                        tree_threshold,
                    };
                    let g = compute_gradients(&model, &batch, &plan).unwrap();
                    assert_eq!(g.jacobians, reference.jacobians);
                    // tree and fold may differ in the last bits
                    let report = compare_gradients(&g.params, &reference.params).unwrap();
                    assert!(report.rel_l2_error < 1e-13, "{chunk} {workers} {schedule:?} {tree_threshold}");
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lbi");
    let model = Model::new(common::small(Backend::DiagSsm)).unwrap();
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let batch = Batch::random(256, 1, 12, &mut DetRng::new(10));
    let a = compute_gradients(&model, &batch, &BackwardPlan::default()).unwrap();
    let b = compute_gradients(&loaded, &batch, &BackwardPlan::default()).unwrap();
    assert_eq!(a.params, b.params);
}
