//! Variant × seed experiment matrix over one synthetic scenario.
//!
//! A plan names a base config, the domains to synthesize, the seeds, and a
//! list of variants that override architecture switches. Each seed gets its
//! own dataset (domain seed + run seed), generated once and shared by every
//! variant. Runs are independent: each writes into its own directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{HeadMode, NormMode};
use crate::error::{Error, Result};
use crate::synth::{generate_domain, DatasetManifest, DomainSpec, Split};
use crate::train::{
    evaluate, metrics_csv, registry_from_manifests, train, EpochSummary, EvalMode, EvalReport, ExperimentConfig,
    TrainOptions,
};

/// Architecture switches a variant may override. Unset fields keep the base
/// config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub norm_mode: Option<NormMode>,
    pub n_harmony_pairs: Option<usize>,
    pub first_stage_only: Option<bool>,
    pub affine_disabled: Option<bool>,
    pub j_poly: Option<usize>,
    pub head_mode: Option<HeadMode>,
}

/// Requires `upper - lower >= min_gap` on the seed-averaged DSC, taken on
/// one domain's average or, without `domain`, on the mean over domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingCheck {
    pub lower: String,
    pub upper: String,
    #[serde(default)]
    pub min_gap: f64,
    pub domain: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    /// Volumes generated per domain and seed.
    pub n_samples: usize,
    #[serde(default)]
    pub base: ExperimentConfig,
    pub domains: Vec<DomainSpec>,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub checks: Vec<OrderingCheck>,
}

impl AblationPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: AblationPlan = toml::from_str(text).map_err(|e| Error::config(format!("ablation plan: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read plan {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() || self.domains.is_empty() {
            return Err(Error::config("plan needs at least one seed, variant and domain"));
        }
        if self.n_samples < 10 {
            return Err(Error::config(format!("n_samples {} leaves empty splits (need >= 10)", self.n_samples)));
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\', ',']) {
                return Err(Error::config(format!("invalid variant name '{}'", v.name)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(Error::config(format!("duplicate variant name '{}'", v.name)));
            }
            self.variant_config(v, self.seeds[0])
                .map_err(|e| Error::config(format!("variant '{}': {e}", v.name)))?;
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("duplicate seeds"));
        }
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !ids.insert(d.domain_id) {
                return Err(Error::config(format!("duplicate domain id {}", d.domain_id)));
            }
        }
        for c in &self.checks {
            for n in [&c.lower, &c.upper] {
                if !names.contains(n.as_str()) {
                    return Err(Error::config(format!("check refers to unknown variant '{n}'")));
                }
            }
            if let Some(d) = &c.domain {
                if !self.domains.iter().any(|s| &s.name == d) {
                    return Err(Error::config(format!("check refers to unknown domain '{d}'")));
                }
            }
        }
        Ok(())
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Base config with the variant's overrides and the run seed applied.
    pub fn variant_config(&self, v: &Variant, seed: u64) -> Result<ExperimentConfig> {
        let mut c = self.base.clone();
        let b = &mut c.backbone;
        if let Some(x) = v.norm_mode {
            b.norm_mode = x;
        }
        if let Some(x) = v.n_harmony_pairs {
            b.n_harmony_pairs = x;
        }
        if let Some(x) = v.first_stage_only {
            b.first_stage_only = x;
        }
        if let Some(x) = v.affine_disabled {
            b.affine_disabled = x;
        }
        if let Some(x) = v.j_poly {
            b.harmony.j_poly = x;
        }
        if let Some(x) = v.head_mode {
            b.head_mode = x;
        }
        c.train.seed = seed;
        c.validate()?;
        Ok(c)
    }

    /// Domain specs for one seed: each domain's own seed offset by it.
    pub fn domain_specs(&self, seed: u64) -> Vec<DomainSpec> {
        self.domains
            .iter()
            .map(|d| DomainSpec { seed: d.seed.wrapping_add(seed), ..d.clone() })
            .collect()
    }
}

/// Generates (or reuses, when the stored spec hash matches) the datasets of
/// one seed under `dir/<domain name>`.
pub fn prepare_data(plan: &AblationPlan, seed: u64, dir: &Path) -> Result<Vec<DatasetManifest>> {
    plan.domain_specs(seed)
        .iter()
        .map(|spec| {
            let d = dir.join(&spec.name);
            match DatasetManifest::load(&d) {
                Ok(m) if m.spec_hash == spec.hash() && m.len() == plan.n_samples => Ok(m),
                _ => generate_domain(spec, plan.n_samples, &d, plan.base.train.dtype),
            }
        })
        .collect()
}

/// Outcome of one (variant, seed) run, scored on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub eval: EvalReport,
    pub epochs: Vec<EpochSummary>,
}

impl RunResult {
    pub fn domain_average(&self, domain: &str) -> Option<f64> {
        self.eval.domains.iter().find(|d| d.name == domain).map(|d| d.average)
    }

    pub fn mean_average(&self) -> f64 {
        self.eval.domains.iter().map(|d| d.average).sum::<f64>() / self.eval.domains.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: OrderingCheck,
    pub lower_value: f64,
    pub upper_value: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub plan: AblationPlan,
    /// Variant-major, then seed in plan order.
    pub runs: Vec<RunResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

impl AblationReport {
    fn domain_names(&self) -> Vec<String> {
        self.plan.domains.iter().map(|d| d.name.clone()).collect()
    }

    fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Seed-averaged DSC in [0, 1] of one domain's average, or of the mean
    /// over domains when `domain` is `None`.
    pub fn variant_mean(&self, variant: &str, domain: Option<&str>) -> Option<f64> {
        let v: Vec<f64> = self
            .runs_of(variant)
            .map(|r| match domain {
                Some(d) => r.domain_average(d),
                None => Some(r.mean_average()),
            })
            .collect::<Option<_>>()?;
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    /// Seed-averaged routing accuracy per domain; `None` for oracle variants.
    pub fn variant_domain_acc(&self, variant: &str, domain: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .runs_of(variant)
            .map(|r| r.eval.domains.iter().find(|d| d.name == domain).and_then(|d| d.domain_acc))
            .collect::<Option<_>>()?;
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    pub fn checks(&self) -> Vec<CheckOutcome> {
        self.plan
            .checks
            .iter()
            .map(|c| {
                let lo = self.variant_mean(&c.lower, c.domain.as_deref()).unwrap_or(f64::NAN);
                let hi = self.variant_mean(&c.upper, c.domain.as_deref()).unwrap_or(f64::NAN);
                CheckOutcome { check: c.clone(), lower_value: lo, upper_value: hi, passed: 100.0 * (hi - lo) >= c.min_gap }
            })
            .collect()
    }

    /// One row per run: DSC average and routing accuracy of each domain.
    pub fn run_log_csv(&self) -> String {
        let names = self.domain_names();
        let mut s = String::from("variant,seed,eval_mode");
        for n in &names {
            write!(s, ",dsc_{n},domain_acc_{n}").unwrap();
        }
        s.push_str(",dsc_mean\n");
        for r in &self.runs {
            let mode = match r.eval.mode {
                EvalMode::DatasetFree => "dataset_free",
                EvalMode::Oracle => "oracle",
            };
            write!(s, "{},{},{mode}", r.variant, r.seed).unwrap();
            for n in &names {
                let d = r.eval.domains.iter().find(|d| &d.name == n).expect("every run scores every domain");
                write!(s, ",{},{}", pct(d.average), d.domain_acc.map(pct).unwrap_or_default()).unwrap();
            }
            writeln!(s, ",{}", pct(r.mean_average())).unwrap();
        }
        s
    }

    /// One row per variant and domain (plus `all`): mean and std over seeds.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,domain,dsc_mean,dsc_std,domain_acc,n_seeds\n");
        for v in &self.plan.variants {
            let runs: Vec<&RunResult> = self.runs_of(&v.name).collect();
            for n in self.domain_names().into_iter().map(Some).chain([None]) {
                let vals: Vec<f64> = runs
                    .iter()
                    .map(|r| match &n {
                        Some(d) => r.domain_average(d).expect("every run scores every domain"),
                        None => r.mean_average(),
                    })
                    .collect();
                let (m, sd) = mean_std(&vals);
                let acc = n.as_deref().and_then(|d| self.variant_domain_acc(&v.name, d)).map(pct).unwrap_or_default();
                writeln!(s, "{},{},{},{},{acc},{}", v.name, n.as_deref().unwrap_or("all"), pct(m), pct(sd), runs.len())
                    .unwrap();
            }
        }
        s
    }

    /// Variant-mean table plus the ordering checks, for the terminal.
    pub fn to_table(&self) -> String {
        let names = self.domain_names();
        let mut s = format!("{:<20}", "variant");
        for n in &names {
            write!(s, " {:>16}", n).unwrap();
        }
        writeln!(s, " {:>16}", "mean").unwrap();
        for v in &self.plan.variants {
            write!(s, "{:<20}", v.name).unwrap();
            let cols: Vec<Option<&str>> = names.iter().map(|n| Some(n.as_str())).chain([None]).collect();
            for d in cols {
                let vals: Vec<f64> = self
                    .runs_of(&v.name)
                    .map(|r| d.map(|d| r.domain_average(d).expect("scored")).unwrap_or_else(|| r.mean_average()))
                    .collect();
                let (m, sd) = mean_std(&vals);
                write!(s, " {:>16}", format!("{:.2} ({:.2})", 100.0 * m, 100.0 * sd)).unwrap();
            }
            s.push('\n');
        }
        for o in self.checks() {
            let c = &o.check;
            writeln!(
                s,
                "check {} + {} <= {} on {}: {:.2} vs {:.2} {}",
                c.lower,
                c.min_gap,
                c.upper,
                c.domain.as_deref().unwrap_or("mean"),
                100.0 * o.lower_value,
                100.0 * o.upper_value,
                if o.passed { "ok" } else { "VIOLATED" }
            )
            .unwrap();
        }
        s
    }

    /// Long-format rows for external plotting: per-class test DSC and the
    /// per-epoch training losses of every run.
    pub fn plot_data_csv(&self) -> String {
        let mut s = String::from("variant,seed,domain,class,epoch,metric,value\n");
        for r in &self.runs {
            for d in &r.eval.domains {
                for (c, v) in d.classes.iter().zip(&d.class_dsc) {
                    writeln!(s, "{},{},{},{c},,test_dsc,{:.6}", r.variant, r.seed, d.name, v).unwrap();
                }
                writeln!(s, "{},{},{},average,,test_dsc,{:.6}", r.variant, r.seed, d.name, d.average).unwrap();
                if let Some(a) = d.domain_acc {
                    writeln!(s, "{},{},{},,,domain_acc,{a:.6}", r.variant, r.seed, d.name).unwrap();
                }
            }
            for e in &r.epochs {
                for (metric, v) in [("loss", e.loss), ("dice_loss", e.dice_loss), ("ce_loss", e.ce_loss), ("aux_loss", e.aux_loss)] {
                    writeln!(s, "{},{},{},,{},{metric},{v:.6}", r.variant, r.seed, e.domain, e.epoch).unwrap();
                }
            }
        }
        s
    }

    /// Writes `runs.csv`, `summary.csv`, `summary.txt` and optionally
    /// `plot_data.csv` into `dir`.
    pub fn write(&self, dir: &Path, plot_data: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("runs.csv"), self.run_log_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("summary.txt"), self.to_table())?;
        if plot_data {
            fs::write(dir.join("plot_data.csv"), self.plot_data_csv())?;
        }
        Ok(())
    }
}

fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join("runs").join(variant).join(format!("seed{seed}"))
}

/// Trains and scores every (variant, seed) pair. Data lives under
/// `out/data/seed<k>`, per-run checkpoints and metrics under
/// `out/runs/<variant>/seed<k>`. Oracle-head variants are scored with the
/// true domain id, all others dataset-free.
pub fn run_ablation(plan: &AblationPlan, out: &Path) -> Result<AblationReport> {
    plan.validate()?;
    let data: Vec<Vec<DatasetManifest>> = plan
        .seeds
        .iter()
        .map(|&s| prepare_data(plan, s, &out.join("data").join(format!("seed{s}"))))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&Variant, usize)> =
        plan.variants.iter().flat_map(|v| (0..plan.seeds.len()).map(move |k| (v, k))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, k)| {
            let seed = plan.seeds[k];
            let manifests = &data[k];
            let cfg = plan.variant_config(v, seed)?;
            let registry = registry_from_manifests(manifests)?;
            let t = Instant::now();
            let ck = train(&cfg, manifests, &registry, TrainOptions::default())?;
            let mode = match cfg.backbone.head_mode {
                HeadMode::OracleMultiHead => EvalMode::Oracle,
                HeadMode::GatedShared => EvalMode::DatasetFree,
            };
            let eval = evaluate(&ck.model, manifests, mode, Split::Test)?;
            log::info!("ablation {} seed {seed}: {:.1}s", v.name, t.elapsed().as_secs_f64());
            let dir = run_dir(out, &v.name, seed);
            fs::create_dir_all(&dir)?;
            ck.save(&dir.join("checkpoint.bin"))?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&ck.history))?;
            fs::write(dir.join("eval.csv"), eval.to_csv())?;
            Ok(RunResult { variant: v.name.clone(), seed, eval, epochs: ck.epochs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { plan: plan.clone(), runs })
}
