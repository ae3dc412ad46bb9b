use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uharmony::backbone::{forward, init_params, Activation, BackboneConfig, HeadMode, NormMode, ParamStore};
use uharmony::gradcheck::{grad_check, GradCheckOptions};
use uharmony::tape::GradTape;
use uharmony::Tensor;

fn volume(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0) + 0.5)
}

fn logits(cfg: &BackboneConfig, params: &ParamStore, x: &Tensor, domain: Option<usize>) -> Tensor {
    let mut tape = GradTape::new();
    let vars = params.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let f = forward(&mut tape, &vars, cfg, xv, domain).unwrap();
    tape.value(f.union_logits).clone()
}

#[test]
fn output_shapes() {
    let cfg = BackboneConfig::default();
    let params = init_params(&cfg, 3, 2, 1).unwrap();
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(volume(0, &[1, 1, 16, 16, 16], 1.0));
    let f = forward(&mut tape, &vars, &cfg, x, None).unwrap();
    assert_eq!(tape.value(f.union_logits).shape(), &[1, 3, 16, 16, 16]);
    assert_eq!(tape.value(f.bottleneck_features).shape(), &[1, 32]);
    assert_eq!(f.stage_stats.len(), 3);
    assert_eq!(f.stage_stats[1].mu.shape(), &[1, 16]);
}

#[test]
fn indivisible_extent_names_the_divisor() {
    let cfg = BackboneConfig::default();
    let params = init_params(&cfg, 2, 1, 1).unwrap();
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(volume(0, &[1, 1, 10, 8, 8], 1.0));
    let err = forward(&mut tape, &vars, &cfg, x, None).unwrap_err().to_string();
    assert!(err.contains("divisible by 4"), "{err}");
}

#[test]
fn harmony_without_restoration_matches_plain_norm_at_init() {
    let x = volume(3, &[2, 1, 8, 8, 8], 3.0);
    for variant in [
        BackboneConfig { n_harmony_pairs: 0, ..Default::default() },
        BackboneConfig { first_stage_only: true, ..Default::default() },
    ] {
        let plain = BackboneConfig { norm_mode: NormMode::PlainInstanceNorm, ..variant.clone() };
        let p_plain = init_params(&plain, 3, 2, 9).unwrap();
        let p_h = init_params(&variant, 3, 2, 9).unwrap();
        let a = logits(&plain, &p_plain, &x, None);
        let b = logits(&variant, &p_h, &x, None);
        assert!(a.max_abs_diff(&b) < 1e-4, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn first_stage_activations_ignore_intensity_scaling() {
    for mode in [NormMode::PlainInstanceNorm, NormMode::Uharmony] {
        let cfg = BackboneConfig { norm_mode: mode, ..Default::default() };
        let mut params = init_params(&cfg, 2, 1, 4).unwrap();
        // The presence-indicator channel is a fixed input, not an intensity;
        // silence it so the stem sees only the scaled modality.
        let k = params.get_mut("enc.0.conv.weight").unwrap();
        let per_in = 27;
        for o in 0..k.dim(0) {
            let start = (o * 2 + 1) * per_in;
            k.data_mut()[start..start + per_in].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = volume(5, &[1, 1, 8, 8, 8], 30.0);
        let out = |x: Tensor| {
            let mut tape = GradTape::new();
            let vars = params.register_frozen(&mut tape);
            let xv = tape.constant(x);
            let f = forward(&mut tape, &vars, &cfg, xv, None).unwrap();
            tape.value(f.encoder_outputs[0]).clone()
        };
        let a = out(x.clone());
        let b = out(x.map(|v| 2.0 * v));
        assert!(a.max_abs_diff(&b) < 1e-6, "{mode:?}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn forward_is_deterministic_and_head_selection_works() {
    let cfg = BackboneConfig { head_mode: HeadMode::OracleMultiHead, base_channels: 4, ..Default::default() };
    let params = init_params(&cfg, 4, 2, 2).unwrap();
    let x = volume(1, &[1, 1, 8, 8, 8], 1.0);
    assert_eq!(logits(&cfg, &params, &x, Some(1)), logits(&cfg, &params, &x, Some(1)));
    assert_ne!(logits(&cfg, &params, &x, Some(0)), logits(&cfg, &params, &x, Some(1)));
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x);
    assert!(forward(&mut tape, &vars, &cfg, xv, None).is_err());
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let cfg = BackboneConfig { base_channels: 4, ..Default::default() };
    let params = init_params(&cfg, 2, 1, 2).unwrap();
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(volume(1, &[1, 1, 8, 8, 8], 1.0));
    let f = forward(&mut tape, &vars, &cfg, xv, None).unwrap();
    let shape = tape.value(f.union_logits).shape().to_vec();
    let mut g = tape.backward_with(f.union_logits, Tensor::zeros(&shape)).unwrap();
    for (path, grad) in vars.collect(&mut g) {
        assert!(grad.data().iter().all(|&v| v == 0.0), "{path}");
    }
}

/// Perturbs harmony coefficients away from the identity so every gradient
/// path through the restoration is exercised.
fn perturbed(cfg: &BackboneConfig, seed: u64) -> ParamStore {
    let mut p = init_params(cfg, 3, 2, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (path, t) in p.iter_mut() {
        let amp = if path.ends_with("lambda") || path.ends_with("gamma") || path.ends_with("delta") {
            0.05
        } else if path.ends_with(".b") || path.ends_with(".bias") {
            0.1
        } else if path.ends_with(".w") {
            0.2
        } else {
            0.0
        };
        for v in t.data_mut() {
            *v += amp * rng.random_range(-1.0..1.0);
        }
    }
    p
}

#[test]
fn end_to_end_gradients() {
    for act in [Activation::Silu, Activation::Relu] {
        let cfg = BackboneConfig { base_channels: 2, activation: act, ..Default::default() };
        let params = perturbed(&cfg, 7);
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).filter(|k| !k.starts_with("gate")).collect();
        let mut inputs = vec![volume(8, &[1, 1, 8, 8, 8], 2.0)];
        inputs.extend(names.iter().map(|n| params.get(n).unwrap().clone()));
        let report = grad_check(
            "backbone",
            |tape, v| {
                let map = names.iter().cloned().zip(v[1..].iter().copied()).collect();
                let vars = uharmony::backbone::ParamVars::from_map(map);
                Ok(forward(tape, &vars, &cfg, v[0], None)?.union_logits)
            },
            &inputs,
            &GradCheckOptions::default().tol(1e-3).sampled(4),
        )
        .unwrap();
        assert!(report.passed(), "{act:?}: {:?}", report.inputs);
    }
}
