use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uharmony::synth::*;
use uharmony::tensor::DType;

fn spec(name: &str, id: usize, mean: f64, noise: f64, lesions: &[(&str, [u32; 2], [f64; 2])]) -> DomainSpec {
    DomainSpec {
        domain_id: id,
        name: name.into(),
        n_modalities: 1,
        intensity_mean: vec![mean],
        intensity_std: vec![1.0],
        noise_std: noise,
        label_set: lesions.iter().map(|l| l.0.to_string()).collect(),
        lesions: lesions
            .iter()
            .map(|&(n, count, radius)| {
                (n.to_string(), LesionSpec { count, radius, offset: Some(2.0), inside: None })
            })
            .collect::<BTreeMap<_, _>>(),
        volume_shape: [24, 24, 24],
        seed: 11,
    }
}

#[test]
fn degenerate_spec_is_constant() {
    let s = spec("flat", 0, 3.25, 0.0, &[("lesion", [0, 0], [2.0, 3.0])]);
    let sample = generate_sample(&s, 4);
    assert!(sample.volume.data().iter().all(|&v| v == 3.25));
    assert!(sample.labels.iter().all(|&l| l == 0));
}

#[test]
fn regeneration_is_byte_identical() {
    let s = spec("a", 0, 0.0, 1.0, &[("lesion", [1, 2], [2.0, 4.0])]);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate_domain(&s, 6, d1.path(), DType::F32).unwrap();
    generate_domain(&s, 6, d2.path(), DType::F32).unwrap();
    for entry in std::fs::read_dir(d1.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(d1.path().join(&name)).unwrap();
        let b = std::fs::read(d2.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    let m = DatasetManifest::load(d1.path()).unwrap();
    let loaded = m.load_sample(3).unwrap();
    let fresh = generate_sample(&s, 3);
    assert_eq!(loaded.labels, fresh.labels);
    assert!(loaded.volume.max_abs_diff(&fresh.volume) < 1e-6);
}

#[test]
fn sphere_volume_matches_continuous_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = 5.0;
    let total: usize = (0..100)
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.random_range(r..24.0 - 1.0 - r));
            sphere_voxels([24, 24, 24], c, r)
        })
        .sum();
    let mean = total as f64 / 100.0;
    let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
    assert!((mean - exact).abs() / exact < 0.2, "{mean} vs {exact}");
}

#[test]
fn nested_classes_sit_inside_their_parent() {
    let mut s = spec("b", 1, 2.0, 0.3, &[("core", [1, 1], [2.0, 2.5]), ("halo", [1, 2], [5.0, 6.0])]);
    s.lesions.get_mut("core").unwrap().inside = Some("halo".into());
    s.lesions.get_mut("halo").unwrap().offset = Some(-1.0);
    for i in 0..10 {
        let smp = generate_sample(&s, i);
        let core = smp.labels.iter().filter(|&&l| l == 1).count();
        let halo = smp.labels.iter().filter(|&&l| l == 2).count();
        assert!(core > 0 && halo > core, "sample {i}: core {core}, halo {halo}");
    }
}

#[test]
fn foreground_biased_crops_hit_lesions() {
    let s = spec("a", 0, 0.0, 1.0, &[("lesion", [1, 1], [3.0, 3.0])]);
    let sample = generate_sample(&s, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hits = (0..1000)
        .filter(|_| crop_patch(&sample, [8, 8, 8], true, &mut rng).unwrap().labels.iter().any(|&l| l != 0))
        .count();
    assert!(hits >= 650, "{hits}");
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    for n in [1, 7, 10, 33, 100] {
        let s = split_indices(n, 5);
        assert_eq!(s.val.len(), n / 10);
        assert_eq!(s.test.len(), n / 5);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn domain_shift_is_measurable() {
    let a = spec("a", 0, 0.0, 1.0, &[("lesion", [0, 0], [2.0, 3.0])]);
    let b = DomainSpec { intensity_mean: vec![2.0], seed: 99, ..a.clone() };
    let means = |s: &DomainSpec| -> Vec<f64> {
        (0..20).map(|i| generate_sample(s, i).volume.data().iter().sum::<f64>() / 24f64.powi(3)).collect()
    };
    let (ma, mb) = (means(&a), means(&b));
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let diff = avg(&mb) - avg(&ma);
    let se = (2.0 / (20.0 * 24f64.powi(3))).sqrt();
    assert!((diff - 2.0).abs() < 3.0 * se, "{diff}");
}

#[test]
fn labels_stay_within_the_label_set() {
    let s = spec("c", 0, 0.0, 1.0, &[("x", [0, 3], [2.0, 4.0]), ("y", [0, 3], [1.0, 3.0])]);
    for i in 0..10 {
        assert!(generate_sample(&s, i).labels.iter().all(|&l| l <= 2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_preserves_class_counts(seed in any::<u64>()) {
        let s = spec("a", 0, 0.0, 1.0, &[("x", [1, 3], [2.0, 4.0]), ("y", [0, 2], [1.0, 3.0])]);
        let sample = generate_sample(&s, (seed % 50) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&sample, &mut rng).unwrap();
        let count = |l: &[u8], k: u8| l.iter().filter(|&&v| v == k).count();
        for k in 0..3 {
            prop_assert_eq!(count(&sample.labels, k), count(&out.labels, k));
        }
        let mut d = AugmentDraw::sample(sample.shape(), &mut rng);
        d.scale = 1.0;
        d.shift = 0.0;
        let moved = apply_augment(&sample, &d).unwrap();
        let mut a: Vec<f64> = sample.volume.data().to_vec();
        let mut b: Vec<f64> = moved.volume.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}
