//! Named batteries of gradient checks, grouped by scope.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::backbone::{forward, init_params, Activation, BackboneConfig, ParamVars};
use crate::error::{Error, Result};
use crate::gated::{cross_entropy_on, gate_logits_on, DomainRegistry};
use crate::harmony::{affine_on, harmonize_on, restore_on, HarmonyVars, TapeStats};
use crate::ops::{self, Reduction};
use crate::tensor::Tensor;
use crate::train::{masked_seg_loss_on, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Every differentiable primitive on the tape plus the losses.
    Ops,
    /// Harmonize, affine and restore, alone and stacked.
    Uharmony,
    /// The whole backbone on one 8³ volume.
    End2End,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "uharmony" => Ok(Scope::Uharmony),
            "end2end" => Ok(Scope::End2End),
            _ => Err(Error::config(format!("unknown gradcheck scope '{s}' (ops, uharmony, end2end)"))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in ±[0.1, 1.5]: away from the ReLU kink, and away from the zeros
/// of 3x² where the central difference error h² dominates.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Projection seed for the checker, decorrelated from the input draws that
/// use `seed` directly.
fn checker(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed: seed ^ 0x5DEE_CE66_D1CE_5EED, ..Default::default() }
}

pub fn ops_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = checker(seed);
    let x = uniform(&mut rng, &[2, 3, 4, 4, 2], -1.0, 1.0);
    let y = uniform(&mut rng, &[2, 3, 4, 4, 2], -1.0, 1.0);
    let mut out = vec![
        grad_check("conv3d k3 s1 p1", |t, v| t.conv3d(v[0], v[1], 1, 1), &[x.clone(), uniform(&mut rng, &[2, 3, 3, 3, 3], -0.5, 0.5)], &o)?,
        grad_check("conv3d k3 s2 p1", |t, v| t.conv3d(v[0], v[1], 2, 1), &[x.clone(), uniform(&mut rng, &[4, 3, 3, 3, 3], -0.5, 0.5)], &o)?,
        grad_check("add_channel_bias", |t, v| t.add_channel_bias(v[0], v[1]), &[x.clone(), uniform(&mut rng, &[3], -1.0, 1.0)], &o)?,
        grad_check("relu", |t, v| Ok(t.relu(v[0])), &[off_zero(&mut rng, &[2, 3, 4, 4, 2])], &o)?,
        grad_check("silu", |t, v| Ok(t.silu(v[0])), &[uniform(&mut rng, &[2, 3, 4, 4, 2], -3.0, 3.0)], &o)?,
        grad_check("add", |t, v| t.add(v[0], v[1]), &[x.clone(), y.clone()], &o)?,
        grad_check("mul", |t, v| t.mul(v[0], v[1]), &[x.clone(), y.clone()], &o)?,
        grad_check("scale", |t, v| Ok(t.scale(v[0], -1.7)), &[x.clone()], &o)?,
        grad_check("powi 3", |t, v| Ok(t.powi(v[0], 3)), &[off_zero(&mut rng, &[2, 3, 4, 4, 2])], &o)?,
        grad_check("spatial mean", |t, v| t.reduce_spatial(v[0], Reduction::Mean), &[x.clone()], &o)?,
        grad_check("spatial variance", |t, v| t.reduce_spatial(v[0], Reduction::Var), &[x.clone()], &o)?,
        grad_check("softmax", |t, v| Ok(t.softmax(v[0])), &[uniform(&mut rng, &[6], -2.0, 2.0)], &o)?,
        grad_check("matmul", |t, v| t.matmul(v[0], v[1]), &[uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)], &o)?,
        grad_check("upsample2", |t, v| t.upsample2(v[0]), &[uniform(&mut rng, &[1, 2, 2, 3, 2], -1.0, 1.0)], &o)?,
        grad_check("downsample2", |t, v| t.downsample2(v[0]), &[x.clone()], &o)?,
        grad_check("concat_channels", |t, v| t.concat_channels(v[0], v[1]), &[x.clone(), uniform(&mut rng, &[2, 1, 4, 4, 2], -1.0, 1.0)], &o)?,
        grad_check("reshape", |t, v| t.reshape(v[0], &[6, 32]), &[x.clone()], &o)?,
    ];
    let phi = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[2], -1.0, 1.0);
    out.push(grad_check("gate_logits", |t, v| gate_logits_on(t, v[0], v[1], v[2]), &[phi.clone(), w.clone(), b.clone()], &o)?);
    out.push(grad_check(
        "domain cross-entropy",
        |t, v| {
            let z = gate_logits_on(t, v[0], v[1], v[2])?;
            cross_entropy_on(t, z, &[0, 1, 1])
        },
        &[phi, w, b],
        &o,
    )?);
    let reg = DomainRegistry::new(&[("a", vec!["lesion"]), ("b", vec!["core", "halo"])])?;
    let logits = uniform(&mut rng, &[2, 4, 2, 2, 3], -2.0, 2.0);
    for (d, allowed) in [(0, vec![0usize, 1]), (1, vec![0, 2, 3])] {
        let targets: Vec<Vec<usize>> =
            (0..2).map(|_| (0..12).map(|_| allowed[rng.random_range(0..allowed.len())]).collect()).collect();
        out.push(grad_check(
            &format!("masked seg loss (domain {d})"),
            |t, v| Ok(masked_seg_loss_on(t, v[0], &targets, d, &reg, &LossWeights::default())?.0),
            std::slice::from_ref(&logits),
            &o,
        )?);
    }
    Ok(out)
}

/// Random harmony parameters with every polynomial coefficient nonzero.
fn harmony_inputs(rng: &mut ChaCha8Rng, c: usize, j: usize) -> Vec<Tensor> {
    vec![
        Tensor::from_fn(&[c], |_| rng.random_range(0.8..1.2)),
        uniform(rng, &[c], -0.3, 0.3),
        uniform(rng, &[c, j], -0.15, 0.15),
        uniform(rng, &[c, j], -0.15, 0.15),
        uniform(rng, &[c, j], -0.15, 0.15),
    ]
}

fn harmony_vars(v: &[crate::tape::Var], j: usize) -> HarmonyVars {
    HarmonyVars { w: v[0], b: v[1], lambda: Some(v[2]), gamma: Some(v[3]), delta: Some(v[4]), eps: 1e-5, j_poly: j }
}

pub fn uharmony_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = checker(seed);
    let mut out = Vec::new();
    let x = Tensor::from_fn(&[2, 2, 3, 3, 2], |_| 0.5 + 2.0 * rng.random_range(-1.0..1.0));
    for (k, name) in ["harmonize x-hat", "harmonize mu", "harmonize sigma"].into_iter().enumerate() {
        out.push(grad_check(
            name,
            |t, v| {
                let (xhat, s) = harmonize_on(t, v[0], 1e-5)?;
                Ok([xhat, s.mu, s.sigma][k])
            },
            std::slice::from_ref(&x),
            &o,
        )?);
    }
    for j in 1..=3 {
        let xt = uniform(&mut rng, &[2, 2, 3, 2, 2], -1.0, 1.0);
        let mut inputs = harmony_inputs(&mut rng, 2, j);
        inputs.push(xt);
        out.push(grad_check(&format!("affine j={j}"), |t, v| affine_on(t, v[5], &harmony_vars(v, j)), &inputs, &o)?);
        inputs.push(uniform(&mut rng, &[2, 2], -1.0, 1.0));
        inputs.push(uniform(&mut rng, &[2, 2], 0.5, 2.0));
        out.push(grad_check(
            &format!("restore j={j}"),
            |t, v| restore_on(t, v[5], &harmony_vars(v, j), &TapeStats { mu: v[6], sigma: v[7] }),
            &inputs,
            &o,
        )?);
        let mut inputs = harmony_inputs(&mut rng, 2, j);
        inputs.push(Tensor::from_fn(&[1, 2, 3, 3, 2], |_| 2.0 + 3.0 * rng.random_range(-1.0..1.0)));
        out.push(grad_check(
            &format!("harmonize-affine-restore j={j}"),
            |t, v| {
                let p = harmony_vars(v, j);
                let (xhat, stats) = harmonize_on(t, v[5], p.eps)?;
                let xt = affine_on(t, xhat, &p)?;
                restore_on(t, xt, &p, &stats)
            },
            &inputs,
            &o,
        )?);
    }
    Ok(out)
}

/// Backbone on a 1×1×8×8×8 volume with perturbed (non-identity) parameters,
/// checked on a sample of 4 elements per parameter tensor at tolerance 1e-3.
pub fn end2end_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let o = checker(seed).tol(1e-3).sampled(4);
    let mut out = Vec::new();
    for act in [Activation::Silu, Activation::Relu] {
        let cfg = BackboneConfig { base_channels: 2, activation: act, ..Default::default() };
        let mut params = init_params(&cfg, 3, 2, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
        for (path, t) in params.iter_mut() {
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
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).filter(|k| !k.starts_with("gate")).collect();
        let mut inputs = vec![Tensor::from_fn(&[1, 1, 8, 8, 8], |_| 2.0 * rng.random_range(-1.0..1.0))];
        for n in &names {
            inputs.push(params.get(n)?.clone());
        }
        out.push(grad_check(
            &format!("backbone ({act:?})"),
            |tape, v| {
                let map: BTreeMap<String, _> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
                Ok(forward(tape, &ParamVars::from_map(map), &cfg, v[0], None)?.union_logits)
            },
            &inputs,
            &o,
        )?);
    }
    Ok(out)
}

pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<GradCheckReport>> {
    match scope {
        Scope::Ops => ops_suite(seed),
        Scope::Uharmony => uharmony_suite(seed),
        Scope::End2End => end2end_suite(seed),
    }
}

/// A scaling op whose recorded backward uses the wrong factor; the check
/// must flag it.
pub fn wrong_backward_fixture() -> Result<GradCheckReport> {
    let x = Tensor::from_fn(&[4], |i| 0.3 + i as f64);
    grad_check(
        "wrong-backward fixture",
        |t, v| {
            let y = ops::scale(t.value(v[0]), 2.0);
            Ok(t.push1(&[v[0]], y, Box::new(|ctx| vec![Some(ops::scale(ctx.grad(0), 2.5))])))
        },
        &[x],
        &GradCheckOptions::default(),
    )
}

/// One line per check: name, elements checked, max relative error, verdict.
pub fn format_reports(reports: &[GradCheckReport]) -> String {
    let mut s = format!("{:<36} {:>8} {:>12} {:>9}  result\n", "op", "elements", "max_rel_err", "tol");
    for r in reports {
        let n: usize = r.inputs.iter().map(|c| c.checked).sum();
        s.push_str(&format!(
            "{:<36} {:>8} {:>12.3e} {:>9.0e}  {}\n",
            r.op,
            n,
            r.max_rel_err,
            r.tol,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
