use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uharmony::gated::{
    argmax, gate, mask_logits, route, similarity, DomainRegistry, GateParams, MaskMode, PrototypeBank, RoutingRule,
};
use uharmony::gradcheck::{grad_check, GradCheckOptions};
use uharmony::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #[test]
    fn gate_is_a_probability_vector(
        (j, m) in (1usize..6, 1usize..6),
        seed in any::<u64>(),
        scale in 0.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GateParams {
            w: Tensor::from_fn(&[j, m], |_| scale * rng.random_range(-1.0..1.0)),
            b: Tensor::from_fn(&[j], |_| scale * rng.random_range(-1.0..1.0)),
        };
        let f: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g = gate(&f, &p).unwrap();
        prop_assert!(g.iter().all(|&v| v >= 0.0));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn route_is_a_probability_vector(
        g in finite_vec(4), s in prop::collection::vec(-1.0f64..1.0, 4), tau in 0.01f64..5.0,
    ) {
        let total: f64 = g.iter().map(|v| v.abs()).sum::<f64>() + 1e-3;
        let probs: Vec<f64> = g.iter().map(|v| (v.abs() + 2.5e-4) / total).collect();
        for rule in [RoutingRule::Product, RoutingRule::GateOnly, RoutingRule::SimOnly] {
            let r = route(&probs, &s, tau, rule).unwrap();
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_bounds_and_scale_invariance(
        protos in prop::collection::vec(finite_vec(5), 3),
        f in finite_vec(5),
        a in 0.01f64..100.0,
    ) {
        let mut bank = PrototypeBank::new(3, 5, 0.9).unwrap();
        for (d, p) in protos.iter().enumerate() {
            bank.update(d, p).unwrap();
        }
        bank.finalize().unwrap();
        let s = similarity(&f, &bank).unwrap();
        prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
        let scaled: Vec<f64> = f.iter().map(|v| a * v).collect();
        let s2 = similarity(&scaled, &bank).unwrap();
        for (x, y) in s.iter().zip(&s2) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let g = vec![1.0 / 3.0; 3];
        prop_assert_eq!(
            argmax(&route(&g, &s, 0.1, RoutingRule::Product).unwrap()),
            argmax(&route(&g, &s2, 0.1, RoutingRule::Product).unwrap())
        );
        for (d, p) in bank.prototypes().iter().enumerate() {
            if p.iter().any(|&v| v != 0.0) {
                prop_assert!((similarity(p, &bank).unwrap()[d] - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn finalized_mean_matches_batch_oracle_under_any_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples: Vec<Vec<f64>> = (0..100).map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let oracle: Vec<f64> = (0..16).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / 100.0).collect();
    for trial in 0..5 {
        let mut order: Vec<usize> = (0..100).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(trial));
        let mut bank = PrototypeBank::new(1, 16, 0.99).unwrap();
        for &i in &order {
            bank.update(0, &samples[i]).unwrap();
        }
        bank.finalize().unwrap();
        for (p, o) in bank.prototype(0).unwrap().iter().zip(&oracle) {
            assert!((p - o).abs() < 1e-12);
        }
    }
}

#[test]
fn hard_mask_never_predicts_outside_inferred_domain() {
    let reg = DomainRegistry::new(&[("a", vec!["lesion"]), ("b", vec!["core", "halo"]), ("c", vec!["halo", "x"])])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let logits = Tensor::from_fn(&[1, reg.n_classes(), 2, 2, 2], |_| rng.random_range(-20.0..20.0));
        let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let (masked, inferred) = mask_logits(&logits, &[r], &reg, MaskMode::Hard).unwrap();
        let mask = reg.mask(inferred[0]).unwrap();
        for v in 0..8 {
            let col: Vec<f64> = (0..reg.n_classes()).map(|k| masked.data()[k * 8 + v]).collect();
            assert!(mask[argmax(&col)]);
        }
    }
}

#[test]
fn gate_logit_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[2], |_| rng.random_range(-1.0..1.0));
    let r = grad_check(
        "gate-logits",
        |t, v| uharmony::gated::gate_logits_on(t, v[0], v[1], v[2]),
        &[phi.clone(), w.clone(), b.clone()],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
    let r = grad_check(
        "domain-cross-entropy",
        |t, v| {
            let z = uharmony::gated::gate_logits_on(t, v[0], v[1], v[2])?;
            uharmony::gated::cross_entropy_on(t, z, &[0, 1, 1])
        },
        &[phi, w, b],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}
