use std::fs;

use uharmony::ablation::*;

const PLAN: &str = r#"
seeds = [3, 4]
n_samples = 10

[base.train]
total_epochs = 3
warmup_epochs = 1
lr_init = 0.01
patch_extent = 8
batches_per_epoch = 2

[base.backbone]
n_stages = 2
base_channels = 2
n_harmony_pairs = 2

[[domains]]
domain_id = 0
name = "a"
n_modalities = 1
intensity_mean = [0.0]
intensity_std = [1.0]
noise_std = 0.3
label_set = ["lesion"]
volume_shape = [8, 8, 8]
seed = 100
[domains.lesions.lesion]
count = [1, 1]
radius = [2.0, 2.0]
offset = 2.0

[[domains]]
domain_id = 1
name = "b"
n_modalities = 1
intensity_mean = [2.0]
intensity_std = [1.0]
noise_std = 0.3
label_set = ["core", "halo"]
volume_shape = [8, 8, 8]
seed = 200
[domains.lesions.halo]
count = [1, 1]
radius = [3.0, 3.0]
offset = -1.0
[domains.lesions.core]
count = [1, 1]
radius = [1.5, 1.5]
offset = 2.0
inside = "halo"

[[variants]]
name = "full"

[[variants]]
name = "plain"
norm_mode = "plain_instance_norm"

[[checks]]
lower = "plain"
upper = "full"
domain = "b"
"#;

#[test]
fn two_by_two_plan_produces_four_runs() {
    let plan = AblationPlan::from_toml(PLAN).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rep = run_ablation(&plan, dir.path()).unwrap();
    assert_eq!(rep.runs.len(), 4);
    let log = rep.run_log_csv();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5, "{log}");
    assert_eq!(lines[0], "variant,seed,eval_mode,dsc_a,domain_acc_a,dsc_b,domain_acc_b,dsc_mean");
    assert!(lines[1].starts_with("full,3,dataset_free,"));
    assert!(lines[4].starts_with("plain,4,dataset_free,"));
    // two variants × (two domains + all)
    assert_eq!(rep.summary_csv().lines().count(), 1 + 2 * 3);
    assert_eq!(rep.checks().len(), 1);
    assert!(rep.to_table().contains("check plain + 0 <= full on b"));

    rep.write(dir.path(), true).unwrap();
    for f in ["runs.csv", "summary.csv", "summary.txt", "plot_data.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let plot = fs::read_to_string(dir.path().join("plot_data.csv")).unwrap();
    assert!(plot.lines().skip(1).all(|l| l.split(',').count() == 7));
    for v in ["full", "plain"] {
        for s in [3, 4] {
            let run = dir.path().join("runs").join(v).join(format!("seed{s}"));
            assert!(run.join("checkpoint.bin").exists() && run.join("metrics.csv").exists());
        }
    }
}

#[test]
fn variants_of_one_seed_share_identical_data() {
    let plan = AblationPlan::from_toml(PLAN).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = prepare_data(&plan, 3, &dir.path().join("x")).unwrap();
    let b = prepare_data(&plan, 3, &dir.path().join("y")).unwrap();
    let c = prepare_data(&plan, 4, &dir.path().join("z")).unwrap();
    for k in 0..2 {
        let read = |m: &uharmony::synth::DatasetManifest| fs::read(m.root.join(&m.samples[0].volume)).unwrap();
        assert_eq!(read(&a[k]), read(&b[k]));
        assert_ne!(read(&a[k]), read(&c[k]));
    }
    // a second call on an existing directory reuses it
    let again = prepare_data(&plan, 3, &dir.path().join("x")).unwrap();
    assert_eq!(again, a);
}

#[test]
fn runs_are_deterministic() {
    let mut plan = AblationPlan::from_toml(PLAN).unwrap();
    plan.seeds = vec![3];
    plan.variants.truncate(1);
    plan.checks.clear();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run_ablation(&plan, d1.path()).unwrap();
    let r2 = run_ablation(&plan, d2.path()).unwrap();
    assert_eq!(r1.run_log_csv(), r2.run_log_csv());
    assert_eq!(r1.plot_data_csv(), r2.plot_data_csv());
}

#[test]
fn invalid_plans_are_rejected() {
    let dup = PLAN.replace("name = \"plain\"", "name = \"full\"");
    assert!(AblationPlan::from_toml(&dup).unwrap_err().to_string().contains("duplicate variant"));
    let bad_check = PLAN.replace("lower = \"plain\"", "lower = \"nope\"");
    assert!(AblationPlan::from_toml(&bad_check).is_err());
    let unresolvable = PLAN.replace("norm_mode = \"plain_instance_norm\"", "n_harmony_pairs = 5");
    let e = AblationPlan::from_toml(&unresolvable).unwrap_err().to_string();
    assert!(e.contains("variant 'plain'"), "{e}");
    let unknown = PLAN.replace("norm_mode = \"plain_instance_norm\"", "norm = \"plain_instance_norm\"");
    assert!(AblationPlan::from_toml(&unknown).is_err());
}
