//! Encoder/decoder pairing of harmonization statistics, both for plain
//! tensors and on the gradient tape.

use std::collections::BTreeMap;

use super::params::{Coefs, HarmonyParams, InstanceStats};
use super::stages;
use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Statistics emitted by encoder layers, waiting for their decoder partner.
/// Each key holds at most one entry and every entry must be consumed exactly
/// once per forward pass.
#[derive(Debug)]
pub struct StatsQueue<S> {
    slots: BTreeMap<String, S>,
}

impl<S> Default for StatsQueue<S> {
    fn default() -> Self {
        StatsQueue { slots: BTreeMap::new() }
    }
}

impl<S> StatsQueue<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, stats: S) -> Result<()> {
        if self.slots.contains_key(key) {
            return Err(Error::Pairing(format!("layer '{key}' already has unconsumed statistics in this pass")));
        }
        self.slots.insert(key.to_string(), stats);
        Ok(())
    }

    pub fn take(&mut self, key: &str) -> Result<S> {
        self.slots
            .remove(key)
            .ok_or_else(|| Error::Pairing(format!("no queued statistics for layer '{key}'")))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Errors if any statistics were produced but never restored.
    pub fn finish(&self) -> Result<()> {
        match self.slots.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Pairing(format!("statistics of layer '{k}' were never consumed"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    /// harmonize -> affine, queueing the statistics.
    Encoder,
    /// Restoration; only reachable through [`apply_restoration`].
    Paired,
}

/// Encoder-side harmonization layer: returns `affine(harmonize(x))` and
/// queues the statistics under `key`.
pub fn harmony_layer_forward(
    x: &Tensor,
    params: &HarmonyParams,
    mode: LayerMode,
    key: &str,
    queue: &mut StatsQueue<InstanceStats>,
) -> Result<(Tensor, InstanceStats)> {
    if mode == LayerMode::Paired {
        return Err(Error::config(format!("layer '{key}': paired mode is applied through apply_restoration")));
    }
    params.validate()?;
    let (xhat, stats) = stages::harmonize(x, params.eps)?;
    let out = stages::affine(&xhat, params)?;
    queue.push(key, stats.clone())?;
    Ok((out, stats))
}

/// Decoder-side restoration with the statistics queued under `key`.
pub fn apply_restoration(
    decoder_feature: &Tensor,
    params: &HarmonyParams,
    key: &str,
    queue: &mut StatsQueue<InstanceStats>,
) -> Result<Tensor> {
    let stats = queue.take(key)?;
    stages::restore(decoder_feature, params, &stats)
}

// ---- tape integration ---------------------------------------------------

/// Tape handles for one layer's [`HarmonyParams`].
#[derive(Clone, Copy, Debug)]
pub struct HarmonyVars {
    pub w: Var,
    pub b: Var,
    pub lambda: Option<Var>,
    pub gamma: Option<Var>,
    pub delta: Option<Var>,
    pub eps: f64,
    pub j_poly: usize,
}

impl HarmonyVars {
    pub fn register(tape: &mut GradTape, p: &HarmonyParams) -> Self {
        HarmonyVars {
            w: tape.param(p.w.clone()),
            b: tape.param(p.b.clone()),
            lambda: p.lambda.clone().map(|t| tape.param(t)),
            gamma: p.gamma.clone().map(|t| tape.param(t)),
            delta: p.delta.clone().map(|t| tape.param(t)),
            eps: p.eps,
            j_poly: p.j_poly,
        }
    }
}

/// Statistics living on the tape so the restoration can push gradients back
/// into the encoder feature they came from.
#[derive(Clone, Copy, Debug)]
pub struct TapeStats {
    pub mu: Var,
    pub sigma: Var,
}

impl TapeStats {
    pub fn values(&self, tape: &GradTape) -> InstanceStats {
        InstanceStats { mu: tape.value(self.mu).clone(), sigma: tape.value(self.sigma).clone() }
    }
}

fn coefs_from<'a>(
    inputs: &[&'a Tensor],
    has_a: bool,
    has_b: bool,
    eps: f64,
    j_poly: usize,
) -> (Coefs<'a>, usize) {
    // inputs layout: [w, b, (poly_a), (poly_b)]
    let mut next = 2;
    let mut take = |present: bool| {
        present.then(|| {
            next += 1;
            inputs[next - 1].data()
        })
    };
    let a = take(has_a);
    let b = take(has_b);
    (
        Coefs { w: inputs[0].data(), b: inputs[1].data(), lambda: a, gamma: a, delta: b, eps, j_poly },
        next,
    )
}

/// Harmonization as one multi-output tape node: `(xhat, mu, sigma)`.
pub fn harmonize_on(tape: &mut GradTape, x: Var, eps: f64) -> Result<(Var, TapeStats)> {
    let (xhat, stats) = stages::harmonize(tape.value(x), eps)?;
    let outs = tape.push(
        &[x],
        vec![xhat, stats.mu, stats.sigma],
        Box::new(|ctx| {
            let stats = InstanceStats { mu: ctx.output(1).clone(), sigma: ctx.output(2).clone() };
            vec![Some(stages::harmonize_backward(
                ctx.output(0),
                &stats,
                ctx.grad(0),
                Some(ctx.grad(1)),
                Some(ctx.grad(2)),
            ))]
        }),
    );
    Ok((outs[0], TapeStats { mu: outs[1], sigma: outs[2] }))
}

pub fn affine_on(tape: &mut GradTape, xhat: Var, p: &HarmonyVars) -> Result<Var> {
    let mut inputs = vec![p.w, p.b];
    inputs.extend(p.lambda);
    let has_l = p.lambda.is_some();
    let (eps, j) = (p.eps, p.j_poly);
    let y = {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
        let (k, _) = coefs_from(&vals, has_l, false, eps, j);
        stages::affine_with(tape.value(xhat), k)?
    };
    inputs.insert(0, xhat);
    Ok(tape.push1(
        &inputs,
        y,
        Box::new(move |ctx| {
            let vals: Vec<&Tensor> = (1..=2 + has_l as usize).map(|i| ctx.input(i)).collect();
            let (k, _) = coefs_from(&vals, has_l, false, eps, j);
            let g = stages::affine_backward_with(ctx.input(0), k, ctx.grad(0));
            let mut out = vec![Some(g.x), Some(g.w), Some(g.b)];
            if has_l {
                out.push(g.lambda);
            }
            out
        }),
    ))
}

pub fn restore_on(tape: &mut GradTape, xt: Var, p: &HarmonyVars, stats: &TapeStats) -> Result<Var> {
    let mut coef_vars = vec![p.w, p.b];
    coef_vars.extend(p.gamma);
    coef_vars.extend(p.delta);
    let has_poly = p.gamma.is_some();
    if has_poly != p.delta.is_some() {
        return Err(Error::config("restoration needs both gamma and delta or neither"));
    }
    let (eps, j) = (p.eps, p.j_poly);
    let y = {
        let vals: Vec<&Tensor> = coef_vars.iter().map(|&v| tape.value(v)).collect();
        let (k, _) = coefs_from(&vals, has_poly, has_poly, eps, j);
        stages::restore_with(tape.value(xt), k, &stats.values(tape))?
    };
    // inputs: [xt, mu, sigma, w, b, (gamma, delta)]
    let mut inputs = vec![xt, stats.mu, stats.sigma];
    inputs.extend(coef_vars);
    Ok(tape.push1(
        &inputs,
        y,
        Box::new(move |ctx| {
            let vals: Vec<&Tensor> = (3..5 + 2 * has_poly as usize).map(|i| ctx.input(i)).collect();
            let (k, _) = coefs_from(&vals, has_poly, has_poly, eps, j);
            let stats = InstanceStats { mu: ctx.input(1).clone(), sigma: ctx.input(2).clone() };
            let g = stages::restore_backward_with(ctx.input(0), k, &stats, ctx.grad(0));
            let mut out = vec![Some(g.x), Some(g.mu), Some(g.sigma), Some(g.w), Some(g.b)];
            if has_poly {
                out.push(g.gamma);
                out.push(g.delta);
            }
            out
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{reduce_spatial, Reduction};

    fn sample(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64 / 10.0).sin() * 3.0 + 1.0)
    }

    #[test]
    fn encoder_output_is_normalized_at_init() {
        let x = sample(&[2, 3, 4, 4, 4]);
        let p = HarmonyParams::identity(3, 2, 1e-5).unwrap();
        let mut q = StatsQueue::new();
        let (out, _) = harmony_layer_forward(&x, &p, LayerMode::Encoder, "enc.0", &mut q).unwrap();
        let m = reduce_spatial(&out, Reduction::Mean).unwrap();
        let v = reduce_spatial(&out, Reduction::Var).unwrap();
        assert!(m.data().iter().all(|m| m.abs() < 1e-6));
        assert!(v.data().iter().all(|v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn two_encoder_layers_keep_independent_stats() {
        let x = sample(&[1, 2, 2, 2, 2]);
        let p = HarmonyParams::identity(2, 1, 1e-5).unwrap();
        let mut q = StatsQueue::new();
        let (h, s0) = harmony_layer_forward(&x, &p, LayerMode::Encoder, "a", &mut q).unwrap();
        let (_, s1) = harmony_layer_forward(&h.map(|v| 5.0 * v + 2.0), &p, LayerMode::Encoder, "b", &mut q).unwrap();
        assert_ne!(s0, s1);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn round_trip_through_queue() {
        let x = sample(&[1, 2, 3, 3, 3]);
        let p = HarmonyParams::identity(2, 3, 1e-5).unwrap();
        let mut q = StatsQueue::new();
        let (out, _) = harmony_layer_forward(&x, &p, LayerMode::Encoder, "s0", &mut q).unwrap();
        let back = apply_restoration(&out, &p, "s0", &mut q).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-4);
        q.finish().unwrap();
    }

    #[test]
    fn pairing_discipline() {
        let x = sample(&[1, 1, 2, 2, 2]);
        let p = HarmonyParams::identity(1, 1, 1e-5).unwrap();
        let mut q = StatsQueue::new();
        harmony_layer_forward(&x, &p, LayerMode::Encoder, "k", &mut q).unwrap();
        let err = harmony_layer_forward(&x, &p, LayerMode::Encoder, "k", &mut q).unwrap_err();
        assert!(matches!(err, Error::Pairing(_)));
        assert!(q.finish().is_err());
        let err = apply_restoration(&x, &p, "missing", &mut q).unwrap_err();
        assert!(err.to_string().contains("missing"));
        assert!(harmony_layer_forward(&x, &p, LayerMode::Paired, "z", &mut q).is_err());
    }
}
