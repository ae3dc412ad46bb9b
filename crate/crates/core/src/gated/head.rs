use serde::{Deserialize, Serialize};

use super::prototypes::{similarity, PrototypeBank, DEFAULT_MOMENTUM};
use super::registry::DomainRegistry;
use crate::error::{shape_mismatch, Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Value written into masked-out channels under hard routing.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingRule {
    /// `r_j ∝ G_j · exp(Sim_j / tau)`
    #[default]
    Product,
    GateOnly,
    SimOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub tau: f64,
    pub rule: RoutingRule,
    pub mask_mode: MaskMode,
    pub momentum: f64,
    /// Let the auxiliary loss reach the backbone through the pooled features
    /// instead of training the gate alone.
    pub aux_end_to_end: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tau: 0.1,
            rule: RoutingRule::Product,
            mask_mode: MaskMode::Hard,
            momentum: DEFAULT_MOMENTUM,
            aux_end_to_end: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("routing temperature must be positive, got {}", self.tau)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!("prototype momentum must be in (0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// `W_G` is `[n_domains, m]`, `B_G` is `[n_domains]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl GateParams {
    pub fn zeros(n_domains: usize, dim: usize) -> Self {
        GateParams { w: Tensor::zeros(&[n_domains, dim]), b: Tensor::zeros(&[n_domains]) }
    }

    pub fn n_domains(&self) -> usize {
        self.b.numel()
    }

    pub fn dim(&self) -> usize {
        self.w.dim(1)
    }

    fn check(&self, features: usize) -> Result<()> {
        let j = self.b.numel();
        if self.w.rank() != 2 || self.w.dim(0) != j {
            return Err(shape_mismatch("gate weight", self.w.shape(), &[j, features]));
        }
        if self.w.dim(1) != features {
            return Err(shape_mismatch("gate features", &[features], &[self.w.dim(1)]));
        }
        Ok(())
    }
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `softmax(W_G · features + B_G)`.
pub fn gate(features: &[f64], params: &GateParams) -> Result<Vec<f64>> {
    params.check(features.len())?;
    let m = features.len();
    let z: Vec<f64> = (0..params.n_domains())
        .map(|j| {
            let row = &params.w.data()[j * m..(j + 1) * m];
            row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() + params.b.data()[j]
        })
        .collect();
    Ok(softmax_vec(&z))
}

/// Gate logits `phi · W^T + B` for a batch `phi: [N, m]` on the tape.
pub fn gate_logits_on(tape: &mut GradTape, phi: Var, w: Var, b: Var) -> Result<Var> {
    let (x, wt, bt) = (tape.value(phi), tape.value(w), tape.value(b));
    if x.rank() != 2 {
        return Err(Error::config(format!("gate input must be [batch, features], got {:?}", x.shape())));
    }
    GateParams { w: wt.clone(), b: bt.clone() }.check(x.dim(1))?;
    let (n, m, j) = (x.dim(0), x.dim(1), bt.numel());
    let mut z = vec![0.0; n * j];
    for i in 0..n {
        for k in 0..j {
            let row = &wt.data()[k * m..(k + 1) * m];
            z[i * j + k] =
                row.iter().zip(&x.data()[i * m..(i + 1) * m]).map(|(a, b)| a * b).sum::<f64>() + bt.data()[k];
        }
    }
    let out = Tensor::from_parts(vec![n, j], z);
    Ok(tape.push1(
        &[phi, w, b],
        out,
        Box::new(move |ctx| {
            let (g, x, w) = (ctx.grad(0).data(), ctx.input(0).data(), ctx.input(1).data());
            let mut gx = vec![0.0; n * m];
            let mut gw = vec![0.0; j * m];
            let mut gb = vec![0.0; j];
            for i in 0..n {
                for k in 0..j {
                    let gik = g[i * j + k];
                    gb[k] += gik;
                    for f in 0..m {
                        gx[i * m + f] += gik * w[k * m + f];
                        gw[k * m + f] += gik * x[i * m + f];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(vec![n, m], gx)),
                Some(Tensor::from_parts(vec![j, m], gw)),
                Some(Tensor::from_parts(vec![j], gb)),
            ]
        }),
    ))
}

/// Mean cross-entropy of `logits: [N, J]` against integer targets.
pub fn cross_entropy_on(tape: &mut GradTape, logits: Var, targets: &[usize]) -> Result<Var> {
    let z = tape.value(logits);
    if z.rank() != 2 || z.dim(0) != targets.len() {
        return Err(shape_mismatch("cross-entropy logits", z.shape(), &[targets.len(), z.dim(z.rank() - 1)]));
    }
    let (n, j) = (z.dim(0), z.dim(1));
    if let Some(&t) = targets.iter().find(|&&t| t >= j) {
        return Err(Error::config(format!("target {t} outside {j} classes")));
    }
    let probs: Vec<Vec<f64>> = (0..n).map(|i| softmax_vec(&z.data()[i * j..(i + 1) * j])).collect();
    let loss = -probs.iter().zip(targets).map(|(p, &t)| p[t].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n as f64;
    let targets = targets.to_vec();
    Ok(tape.push1(
        &[logits],
        Tensor::scalar(loss),
        Box::new(move |ctx| {
            let g = ctx.grad(0).item() / n as f64;
            let mut out = Vec::with_capacity(n * j);
            for (p, &t) in probs.iter().zip(&targets) {
                out.extend(p.iter().enumerate().map(|(k, &v)| g * (v - if k == t { 1.0 } else { 0.0 })));
            }
            vec![Some(Tensor::from_parts(vec![n, j], out))]
        }),
    ))
}

/// Routing weights over domains from gate probabilities and similarities.
pub fn route(gate_probs: &[f64], sims: &[f64], tau: f64, rule: RoutingRule) -> Result<Vec<f64>> {
    if gate_probs.len() != sims.len() {
        return Err(shape_mismatch("routing inputs", &[gate_probs.len()], &[sims.len()]));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("routing temperature must be positive, got {tau}")));
    }
    let smax = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = gate_probs
        .iter()
        .zip(sims)
        .map(|(&g, &s)| match rule {
            RoutingRule::Product => g * ((s - smax) / tau).exp(),
            RoutingRule::GateOnly => g,
            RoutingRule::SimOnly => ((s - smax) / tau).exp(),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        let n = raw.len() as f64;
        return Ok(vec![1.0 / n; raw.len()]);
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Dataset-free routing for one pooled feature vector.
pub fn infer_routing(
    features: &[f64],
    gate_params: &GateParams,
    bank: &PrototypeBank,
    cfg: &HeadConfig,
) -> Result<Vec<f64>> {
    let g = gate(features, gate_params)?;
    let s = if cfg.rule == RoutingRule::GateOnly { vec![0.0; g.len()] } else { similarity(features, bank)? };
    route(&g, &s, cfg.tau, cfg.rule)
}

/// Applies each sample's routing to its union logits. Returns the masked
/// logits and the inferred (argmax) domain of every sample.
pub fn mask_logits(
    logits: &Tensor,
    routing: &[Vec<f64>],
    registry: &DomainRegistry,
    mode: MaskMode,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, p) = logits.feature_dims()?;
    if c != registry.n_classes() {
        return Err(Error::config(format!(
            "logits have {c} channels but the registry's union has {}",
            registry.n_classes()
        )));
    }
    if routing.len() != n {
        return Err(Error::config(format!("{} routing vectors for a batch of {n}", routing.len())));
    }
    let mut out = logits.clone();
    let mut inferred = Vec::with_capacity(n);
    for (i, r) in routing.iter().enumerate() {
        if r.len() != registry.n_domains() {
            return Err(Error::config(format!(
                "routing over {} domains but the registry has {}",
                r.len(),
                registry.n_domains()
            )));
        }
        let d = argmax(r);
        inferred.push(d);
        let factors: Vec<f64> = match mode {
            MaskMode::Hard => registry.mask(d)?.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            MaskMode::Soft => (0..c)
                .map(|k| (0..r.len()).map(|j| if registry.mask(j).unwrap()[k] { r[j] } else { 0.0 }).sum())
                .collect(),
        };
        for (k, &f) in factors.iter().enumerate() {
            let block = &mut out.data_mut()[(i * c + k) * p..(i * c + k + 1) * p];
            match mode {
                MaskMode::Hard if f == 0.0 => block.iter_mut().for_each(|v| *v = MASKED_LOGIT),
                MaskMode::Hard => {}
                MaskMode::Soft => block.iter_mut().for_each(|v| *v *= f),
            }
        }
    }
    Ok((out, inferred))
}

/// Hard mask by known domain ids (oracle evaluation path).
pub fn mask_logits_by_domain(logits: &Tensor, domains: &[usize], registry: &DomainRegistry) -> Result<Tensor> {
    let routing: Vec<Vec<f64>> = domains
        .iter()
        .map(|&d| {
            registry.domain(d)?;
            Ok((0..registry.n_domains()).map(|j| if j == d { 1.0 } else { 0.0 }).collect())
        })
        .collect::<Result<_>>()?;
    Ok(mask_logits(logits, &routing, registry, MaskMode::Hard)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        let p = GateParams::zeros(3, 4);
        let g = gate(&[1.0, 2.0, 3.0, 4.0], &p).unwrap();
        assert!(g.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(gate(&[5.0], &GateParams::zeros(1, 1)).unwrap(), [1.0]);
        let p = GateParams { w: Tensor::new(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap(), b: Tensor::zeros(&[2]) };
        let g = gate(&[1.0, 0.0], &p).unwrap();
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((g[0] - s10).abs() < 1e-12 && (g[0] - 0.99995).abs() < 1e-5);
        assert!(gate(&[1.0], &p).is_err());
    }

    #[test]
    fn route_examples() {
        let r = route(&[0.5, 0.5], &[1.0, -1.0], 0.5, RoutingRule::Product).unwrap();
        assert!((r[0] - 0.98201).abs() < 1e-5 && (r[1] - 0.01799).abs() < 1e-5);
        assert_eq!(route(&[1.0], &[0.3], 0.1, RoutingRule::Product).unwrap(), [1.0]);
        let r = route(&[0.25; 4], &[0.2; 4], 0.1, RoutingRule::Product).unwrap();
        assert!(r.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(route(&[0.7, 0.3], &[-1.0, 1.0], 0.1, RoutingRule::GateOnly).unwrap(), [0.7, 0.3]);
        assert!(route(&[0.5], &[0.0, 1.0], 0.1, RoutingRule::Product).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn mask_examples() {
        let reg = DomainRegistry::new(&[("p", vec!["a", "b"]), ("q", vec!["b", "c"])]).unwrap();
        let logits = Tensor::ones(&[1, 4, 1, 1, 2]);
        let (soft, _) = mask_logits(&logits, &[vec![0.5, 0.5]], &reg, MaskMode::Soft).unwrap();
        let per_channel: Vec<f64> = (0..4).map(|k| soft.data()[k * 2]).collect();
        assert_eq!(per_channel, [1.0, 0.5, 1.0, 0.5]);
        let (hard, d) = mask_logits(&logits, &[vec![0.2, 0.8]], &reg, MaskMode::Hard).unwrap();
        assert_eq!(d, [1]);
        assert_eq!(hard.data()[2], MASKED_LOGIT);
        assert_eq!(hard.data()[4], 1.0);
        assert!(mask_logits(&logits, &[vec![1.0]], &reg, MaskMode::Hard).is_err());
    }

    #[test]
    fn single_domain_mask_is_noop() {
        let reg = DomainRegistry::new(&[("p", vec!["a"])]).unwrap();
        let logits = Tensor::from_fn(&[1, 2, 2, 1, 1], |i| i as f64 - 1.5);
        let (out, d) = mask_logits(&logits, &[vec![1.0]], &reg, MaskMode::Hard).unwrap();
        assert_eq!(out, logits);
        assert_eq!(d, [0]);
    }
}
