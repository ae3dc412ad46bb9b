use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gated::{masked_loss_channels, DomainRegistry};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Additive smoothing of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::config(format!("dice: mask lengths {} and {} differ", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dice: f64,
    pub cross_entropy: f64,
    /// Auxiliary domain cross-entropy on the gate logits.
    pub domain_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 0.5, cross_entropy: 0.5, domain_aux: 0.1 }
    }
}

/// Values of the two segmentation terms, before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossParts {
    pub dice: f64,
    pub cross_entropy: f64,
}

/// Maps local labels of `domain` to union channels, checking each value.
/// `sample_ids` name the samples in error messages.
pub fn labels_to_union(
    labels: &[&[u8]],
    sample_ids: &[usize],
    domain: usize,
    registry: &DomainRegistry,
) -> Result<Vec<Vec<usize>>> {
    let d = registry.domain(domain)?;
    let table: Vec<usize> =
        (0..=d.labels.len()).map(|l| registry.local_to_union(domain, l)).collect::<Result<_>>()?;
    labels
        .iter()
        .zip(sample_ids)
        .map(|(ls, &id)| {
            ls.iter()
                .map(|&l| {
                    table.get(l as usize).copied().ok_or_else(|| {
                        Error::Data(format!("sample {id}: class {l} is outside domain '{}' label set", d.name))
                    })
                })
                .collect()
        })
        .collect()
}

/// Soft-Dice plus cross-entropy over the domain's own channels and
/// background. The softmax runs over that channel subset only, so every
/// other union channel gets exactly zero gradient.
///
/// `targets[i]` holds union channel indices for sample `i`. Dice is taken
/// per sample and per foreground class, then averaged; cross-entropy is
/// averaged over all voxels.
pub fn masked_seg_loss_on(
    tape: &mut GradTape,
    logits: Var,
    targets: &[Vec<usize>],
    domain: usize,
    registry: &DomainRegistry,
    weights: &LossWeights,
) -> Result<(Var, SegLossParts)> {
    let z = tape.value(logits);
    let (n, c, p) = z.feature_dims()?;
    if c != registry.n_classes() {
        return Err(Error::config(format!("logits have {c} channels, union has {}", registry.n_classes())));
    }
    if targets.len() != n || targets.iter().any(|t| t.len() != p) {
        return Err(Error::config(format!("targets do not cover a batch of {n} x {p} voxels")));
    }
    let fg = masked_loss_channels(domain, registry)?;
    let mut chans = vec![0];
    chans.extend(&fg);
    let allowed = registry.mask(domain)?;
    for t in targets {
        if let Some(&bad) = t.iter().find(|&&k| k >= c || !allowed[k]) {
            return Err(Error::Data(format!("union class {bad} is outside domain {domain}'s label set")));
        }
    }
    let s = chans.len();
    let z = z.data();

    // probs[i][j][v]: softmax over the allowed channels.
    let mut probs = vec![0.0; n * s * p];
    for i in 0..n {
        for v in 0..p {
            let zi = |j: usize| z[(i * c + chans[j]) * p + v];
            let m = (0..s).map(zi).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..s {
                let e = (zi(j) - m).exp();
                probs[(i * s + j) * p + v] = e;
                total += e;
            }
            for j in 0..s {
                probs[(i * s + j) * p + v] /= total;
            }
        }
    }
    let slot: Vec<usize> = {
        let mut slot = vec![usize::MAX; c];
        chans.iter().enumerate().for_each(|(j, &k)| slot[k] = j);
        slot
    };

    let nv = (n * p) as f64;
    let mut ce = 0.0;
    for i in 0..n {
        for (v, &k) in targets[i].iter().enumerate() {
            ce -= probs[(i * s + slot[k]) * p + v].max(f64::MIN_POSITIVE).ln();
        }
    }
    ce /= nv;

    // Soft Dice per (sample, foreground class): (2I + s) / (U + s).
    let nf = fg.len();
    let mut inter = vec![0.0; n * nf];
    let mut union = vec![0.0; n * nf];
    for i in 0..n {
        for j in 1..s {
            let (mut a, mut u) = (0.0, 0.0);
            for (v, &k) in targets[i].iter().enumerate() {
                let pv = probs[(i * s + j) * p + v];
                let g = (k == chans[j]) as u8 as f64;
                a += pv * g;
                u += pv + g;
            }
            inter[i * nf + j - 1] = a;
            union[i * nf + j - 1] = u;
        }
    }
    let dice_loss = if nf == 0 {
        0.0
    } else {
        let mean: f64 = inter.iter().zip(&union).map(|(a, u)| (2.0 * a + DICE_SMOOTH) / (u + DICE_SMOOTH)).sum::<f64>()
            / (n * nf) as f64;
        1.0 - mean
    };
    let total = weights.dice * dice_loss + weights.cross_entropy * ce;
    let parts = SegLossParts { dice: dice_loss, cross_entropy: ce };

    let (wd, wc) = (weights.dice, weights.cross_entropy);
    let targets = targets.to_vec();
    let shape = tape.value(logits).shape().to_vec();
    let out = tape.push1(
        &[logits],
        Tensor::scalar(total),
        Box::new(move |ctx| {
            let g0 = ctx.grad(0).item();
            let mut grad = vec![0.0; n * c * p];
            let mut dp = vec![0.0; s];
            for i in 0..n {
                for v in 0..p {
                    let k = targets[i][v];
                    // Upstream gradient with respect to each probability.
                    dp[0] = 0.0;
                    for j in 1..s {
                        let (a, u) = (inter[i * nf + j - 1], union[i * nf + j - 1]);
                        let g = (k == chans[j]) as u8 as f64;
                        let dd = (2.0 * g * (u + DICE_SMOOTH) - (2.0 * a + DICE_SMOOTH)) / (u + DICE_SMOOTH).powi(2);
                        dp[j] = -wd * dd / (n * nf) as f64;
                    }
                    let pk = |j: usize| probs[(i * s + j) * p + v];
                    let inner: f64 = (0..s).map(|j| pk(j) * dp[j]).sum();
                    for j in 0..s {
                        let ce_grad = wc * (pk(j) - (k == chans[j]) as u8 as f64) / nv;
                        grad[(i * c + chans[j]) * p + v] = g0 * (pk(j) * (dp[j] - inner) + ce_grad);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), grad))]
        }),
    );
    Ok((out, parts))
}
