use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "epoch,domain,class,dsc,loss,domain_acc";

/// One line of the metrics log. DSC and routing accuracy come from the
/// validation split and are empty on epochs without validation; `loss` is
/// the mean training loss of the domain's batches in that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub domain: String,
    pub class: String,
    pub dsc: Option<f64>,
    pub loss: Option<f64>,
    pub domain_acc: Option<f64>,
}

/// Mean training losses of one domain over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub domain: String,
    pub batches: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub aux_loss: f64,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.epoch, r.domain, r.class, field(r.dsc), field(r.loss), field(r.domain_acc))
            .unwrap();
    }
    s
}
