use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{dice, labels_to_union};
use super::model::{network_view, EvalMode, Model};
use crate::error::{Error, Result};
use crate::gated::{DomainRegistry, PrototypeBank};
use crate::synth::{DatasetManifest, Sample, Split};

/// Scores of one domain: per-sample per-class DSC, their class means, and
/// the spread across classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: usize,
    pub name: String,
    pub classes: Vec<String>,
    /// `per_sample[i][k]`: DSC of class `k` on sample `i`, in [0, 1].
    pub per_sample: Vec<Vec<f64>>,
    pub class_dsc: Vec<f64>,
    pub average: f64,
    pub std: f64,
    /// Fraction of samples whose routed domain is the true one.
    pub domain_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub domains: Vec<DomainEval>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Scores `samples` of `domain`. `bank` is required in dataset-free mode.
pub fn evaluate_samples(
    model: &Model,
    domain: usize,
    samples: &[Sample],
    mode: EvalMode,
    bank: Option<&PrototypeBank>,
) -> Result<DomainEval> {
    let reg = &model.registry;
    let desc = reg.domain(domain)?;
    let channels: Vec<usize> =
        (1..=desc.labels.len()).map(|l| reg.local_to_union(domain, l)).collect::<Result<_>>()?;
    let div = model.config.backbone.divisor();
    let patch = model.config.train.patch_extent;
    let scored: Vec<(Vec<f64>, Option<bool>)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let view = network_view(s, div, patch);
            let pred = model.predict_with(&view.volume, mode, domain, bank)?;
            let gt = labels_to_union(&[&view.labels], &[i], domain, reg)?.pop().expect("one sample");
            let dsc = channels
                .iter()
                .map(|&k| {
                    let p: Vec<bool> = pred.labels.iter().map(|&l| l == k).collect();
                    let g: Vec<bool> = gt.iter().map(|&l| l == k).collect();
                    dice(&p, &g)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((dsc, pred.inferred_domain.map(|d| d == domain)))
        })
        .collect::<Result<_>>()?;
    let n = scored.len();
    let class_dsc: Vec<f64> = (0..channels.len())
        .map(|k| if n == 0 { f64::NAN } else { scored.iter().map(|s| s.0[k]).sum::<f64>() / n as f64 })
        .collect();
    let (average, std) = mean_std(&class_dsc);
    let domain_acc = match mode {
        EvalMode::DatasetFree if n > 0 => {
            Some(scored.iter().filter(|s| s.1 == Some(true)).count() as f64 / n as f64)
        }
        _ => None,
    };
    Ok(DomainEval {
        domain,
        name: desc.name.clone(),
        classes: desc.labels.clone(),
        per_sample: scored.into_iter().map(|s| s.0).collect(),
        class_dsc,
        average,
        std,
        domain_acc,
    })
}

/// Checks that each manifest describes the registry domain of the same id.
pub fn check_manifests(registry: &DomainRegistry, manifests: &[DatasetManifest]) -> Result<()> {
    for m in manifests {
        let d = registry.domain(m.domain_id)?;
        if d.name != m.name || d.labels != m.labels {
            return Err(Error::config(format!(
                "manifest '{}' (id {}, classes {:?}) does not match registry domain '{}' (classes {:?})",
                m.name, m.domain_id, m.labels, d.name, d.labels
            )));
        }
    }
    Ok(())
}

/// Per-domain, per-class DSC on `split` of every manifest.
pub fn evaluate(model: &Model, manifests: &[DatasetManifest], mode: EvalMode, split: Split) -> Result<EvalReport> {
    check_manifests(&model.registry, manifests)?;
    let bank = match mode {
        EvalMode::DatasetFree => Some(model.routing_bank()?),
        EvalMode::Oracle => None,
    };
    let domains = manifests
        .iter()
        .map(|m| evaluate_samples(model, m.domain_id, &m.load_split(split)?, mode, bank.as_ref()))
        .collect::<Result<_>>()?;
    Ok(EvalReport { mode, domains })
}

impl EvalReport {
    /// Plain-text table: DSC in percent per class, then `average (std)` and
    /// routing accuracy per domain.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            EvalMode::DatasetFree => "dataset_free",
            EvalMode::Oracle => "oracle",
        };
        writeln!(s, "mode: {mode}").unwrap();
        for d in &self.domains {
            writeln!(s, "domain {} ({} samples)", d.name, d.per_sample.len()).unwrap();
            for (c, v) in d.classes.iter().zip(&d.class_dsc) {
                writeln!(s, "  {c:<16} {:>7.2}", 100.0 * v).unwrap();
            }
            writeln!(s, "  {:<16} {:>7.2} ({:.2})", "average", 100.0 * d.average, 100.0 * d.std).unwrap();
            if let Some(a) = d.domain_acc {
                writeln!(s, "  {:<16} {:>7.2}", "domain_acc", 100.0 * a).unwrap();
            }
        }
        s
    }

    /// `domain,class,dsc,domain_acc` with DSC in percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,class,dsc,domain_acc\n");
        for d in &self.domains {
            let acc = d.domain_acc.map(|a| format!("{:.4}", a)).unwrap_or_default();
            for (c, v) in d.classes.iter().zip(&d.class_dsc).chain([(&"average".to_string(), &d.average)]) {
                writeln!(s, "{},{},{:.4},{}", d.name, c, 100.0 * v, acc).unwrap();
            }
        }
        s
    }
}
