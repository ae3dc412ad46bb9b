//! Small symmetric 3D encoder/decoder with configurable harmonization.
//!
//! Encoder stage `s` has `base_channels * 2^s` channels: (2x average-pool
//! for `s > 0`) -> 3x3x3 conv -> bias -> activation -> normalization. The
//! decoder mirrors it level by level: (nearest 2x upsample -> concat skip
//! for all but the bottleneck level) -> 3x3x3 conv -> bias -> activation ->
//! instance norm with scale and shift -> restoration with the paired encoder
//! statistics. A 1x1x1 conv maps to the union label channels.
//!
//! Pairing is outermost-first: encoder stage `l` pairs with the decoder stage
//! at level `l` whenever `l < n_harmony_pairs`.

mod store;

pub use store::{ParamStore, ParamVars};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmony::{
    affine_on, harmonize_on, restore_on, HarmonyConfig, HarmonyParams, InstanceStats, StatsQueue, TapeStats,
    MAX_J_POLY,
};
use crate::ops::Reduction;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    PlainInstanceNorm,
    #[default]
    Uharmony,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One shared head over the union labels, routed by the gate.
    #[default]
    GatedShared,
    /// One head per domain, selected by the true domain id.
    OracleMultiHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_stages: usize,
    pub base_channels: usize,
    /// Number of modality channels the stem expects.
    pub modalities: usize,
    pub norm_mode: NormMode,
    pub n_harmony_pairs: usize,
    /// Harmonize in the encoder but skip the decoder restoration.
    pub first_stage_only: bool,
    /// Skip the affine stage after harmonization.
    pub affine_disabled: bool,
    pub head_mode: HeadMode,
    pub activation: Activation,
    pub harmony: HarmonyConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_stages: 3,
            base_channels: 8,
            modalities: 1,
            norm_mode: NormMode::Uharmony,
            n_harmony_pairs: 3,
            first_stage_only: false,
            affine_disabled: false,
            head_mode: HeadMode::GatedShared,
            activation: Activation::Relu,
            harmony: HarmonyConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 || self.base_channels == 0 || self.modalities == 0 {
            return Err(Error::config("n_stages, base_channels and modalities must all be >= 1"));
        }
        if self.n_stages > 6 {
            return Err(Error::config(format!("n_stages = {} is beyond the supported 6", self.n_stages)));
        }
        if self.n_harmony_pairs > self.n_stages {
            return Err(Error::config(format!(
                "n_harmony_pairs = {} exceeds n_stages = {}",
                self.n_harmony_pairs, self.n_stages
            )));
        }
        if self.harmony.j_poly > MAX_J_POLY {
            return Err(Error::config(format!("j_poly must be in 0..={MAX_J_POLY}, got {}", self.harmony.j_poly)));
        }
        if !(self.harmony.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.harmony.eps)));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Length of the pooled bottleneck feature.
    pub fn feature_dim(&self) -> usize {
        self.channels(self.n_stages - 1)
    }

    pub fn divisor(&self) -> usize {
        1 << (self.n_stages - 1)
    }

    /// Whether encoder stage `l` uses a harmony layer (as opposed to plain
    /// instance normalization with scale and shift).
    pub fn harmonized(&self, l: usize) -> bool {
        self.norm_mode == NormMode::Uharmony && l < self.n_harmony_pairs
    }

    /// Whether the decoder stage at level `l` restores encoder statistics.
    pub fn restored(&self, l: usize) -> bool {
        self.harmonized(l) && !self.first_stage_only
    }

    fn stage_j_poly(&self, l: usize) -> usize {
        if self.harmonized(l) {
            self.harmony.j_poly
        } else {
            0
        }
    }
}

/// Zero-fills missing modality channels and appends one presence indicator
/// channel per expected modality: `[N, n_mod, ...] -> [N, 2 * expected, ...]`.
pub fn modality_adapter(batch: &Tensor, expected: usize) -> Result<Tensor> {
    let (n, m, p) = batch.feature_dims()?;
    if m > expected {
        return Err(Error::config(format!("input has {m} modalities but the model expects at most {expected}")));
    }
    let s = batch.spatial();
    let mut out = Tensor::zeros(&[n, 2 * expected, s[0], s[1], s[2]]);
    for i in 0..n {
        let src = &batch.data()[i * m * p..(i + 1) * m * p];
        let dst = &mut out.data_mut()[i * 2 * expected * p..(i + 1) * 2 * expected * p];
        dst[..m * p].copy_from_slice(src);
        dst[expected * p..(expected + m) * p].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(out)
}

/// Fresh parameters: He-normal conv kernels, zero biases, identity harmony
/// layers, small-normal gate weights. `n_classes` is the union label count.
pub fn init_params(cfg: &BackboneConfig, n_classes: usize, n_domains: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = |store: &mut ParamStore, rng: &mut ChaCha8Rng, path: &str, c_out: usize, c_in: usize, k: usize| {
        let std = (2.0 / (c_in * k * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        store.insert(format!("{path}.weight"), Tensor::from_fn(&[c_out, c_in, k, k, k], |_| dist.sample(rng)));
        store.insert(format!("{path}.bias"), Tensor::zeros(&[c_out]));
    };
    let n = cfg.n_stages;
    for s in 0..n {
        let c_in = if s == 0 { 2 * cfg.modalities } else { cfg.channels(s - 1) };
        conv(&mut store, &mut rng, &format!("enc.{s}.conv"), cfg.channels(s), c_in, 3);
        let mut h = HarmonyParams::identity(cfg.channels(s), cfg.stage_j_poly(s), cfg.harmony.eps)?;
        if !cfg.restored(s) {
            h.gamma = None;
            h.delta = None;
        }
        if cfg.affine_disabled && cfg.harmonized(s) {
            h.lambda = None;
        }
        for (name, t) in [("w", Some(h.w)), ("b", Some(h.b)), ("lambda", h.lambda), ("gamma", h.gamma), ("delta", h.delta)]
        {
            if let Some(t) = t {
                store.insert(format!("enc.{s}.norm.{name}"), t);
            }
        }
    }
    for k in 0..n {
        let l = n - 1 - k;
        let c_in = if k == 0 { cfg.channels(l) } else { cfg.channels(l + 1) + cfg.channels(l) };
        conv(&mut store, &mut rng, &format!("dec.{k}.conv"), cfg.channels(l), c_in, 3);
        let h = HarmonyParams::identity(cfg.channels(l), 0, cfg.harmony.eps)?;
        store.insert(format!("dec.{k}.norm.w"), h.w);
        store.insert(format!("dec.{k}.norm.b"), h.b);
    }
    match cfg.head_mode {
        HeadMode::GatedShared => conv(&mut store, &mut rng, "head", n_classes, cfg.channels(0), 1),
        HeadMode::OracleMultiHead => {
            for d in 0..n_domains {
                conv(&mut store, &mut rng, &format!("head.{d}"), n_classes, cfg.channels(0), 1);
            }
        }
    }
    if cfg.head_mode == HeadMode::GatedShared {
        let dist = Normal::new(0.0, 0.01).expect("positive std");
        store.insert("gate.weight", Tensor::from_fn(&[n_domains, cfg.feature_dim()], |_| dist.sample(&mut rng)));
        store.insert("gate.bias", Tensor::zeros(&[n_domains]));
    }
    Ok(store)
}

/// What one forward pass leaves behind.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts {
    pub union_logits: Var,
    /// Pooled bottleneck feature `[N, feature_dim]`.
    pub bottleneck_features: Var,
    /// Statistics of every paired stage, outermost first.
    pub stage_stats: Vec<InstanceStats>,
    /// Normalized encoder outputs, one per stage.
    pub encoder_outputs: Vec<Var>,
}

fn activate(tape: &mut GradTape, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Silu => tape.silu(x),
    }
}

fn conv_block(tape: &mut GradTape, vars: &ParamVars, path: &str, x: Var, padding: usize) -> Result<Var> {
    let y = tape.conv3d(x, vars.get(&format!("{path}.weight"))?, 1, padding)?;
    tape.add_channel_bias(y, vars.get(&format!("{path}.bias"))?)
}

/// Runs the network on `batch: [N, modalities_present, h, w, d]`.
/// `domain` selects the head in oracle mode and is ignored otherwise.
pub fn forward(
    tape: &mut GradTape,
    vars: &ParamVars,
    cfg: &BackboneConfig,
    batch: Var,
    domain: Option<usize>,
) -> Result<ForwardArtifacts> {
    cfg.validate()?;
    let input = tape.value(batch);
    if input.rank() != 5 {
        return Err(Error::config(format!("backbone input must be [batch, modality, h, w, d], got {:?}", input.shape())));
    }
    let div = cfg.divisor();
    if input.spatial().iter().any(|e| e % div != 0) {
        return Err(Error::config(format!(
            "spatial extents {:?} must be divisible by {div} for {} stages",
            input.spatial(),
            cfg.n_stages
        )));
    }
    let (n_in, m_in, vox) = input.feature_dims()?;
    let adapted = modality_adapter(input, cfg.modalities)?;
    let expected = cfg.modalities;
    let x0 = tape.push1(
        &[batch],
        adapted,
        Box::new(move |ctx| {
            let g = ctx.grad(0).data();
            let mut out = Vec::with_capacity(n_in * m_in * vox);
            for i in 0..n_in {
                let base = i * 2 * expected * vox;
                out.extend_from_slice(&g[base..base + m_in * vox]);
            }
            vec![Some(Tensor::new(ctx.input(0).shape(), out).expect("sliced to input shape"))]
        }),
    );

    let n = cfg.n_stages;
    let eps = cfg.harmony.eps;
    let mut queue: StatsQueue<TapeStats> = StatsQueue::new();
    let mut skips = Vec::with_capacity(n);
    let mut stage_stats = Vec::new();
    let mut pre_bottleneck = None;
    let mut h = x0;
    for s in 0..n {
        if s > 0 {
            h = tape.downsample2(h)?;
        }
        let a = conv_block(tape, vars, &format!("enc.{s}.conv"), h, 1)?;
        let a = activate(tape, a, cfg.activation);
        if s == n - 1 {
            pre_bottleneck = Some(a);
        }
        let prefix = format!("enc.{s}.norm");
        let (xhat, stats) = harmonize_on(tape, a, eps)?;
        let hv = vars.harmony(&prefix, eps, cfg.stage_j_poly(s))?;
        h = if cfg.harmonized(s) && cfg.affine_disabled { xhat } else { affine_on(tape, xhat, &hv)? };
        if cfg.restored(s) {
            stage_stats.push(stats.values(tape));
            queue.push(&prefix, stats)?;
        }
        skips.push(h);
    }
    let encoder_outputs = skips.clone();

    for k in 0..n {
        let l = n - 1 - k;
        let x = if k == 0 {
            h
        } else {
            let up = tape.upsample2(h)?;
            tape.concat_channels(up, skips[l])?
        };
        let a = conv_block(tape, vars, &format!("dec.{k}.conv"), x, 1)?;
        let a = activate(tape, a, cfg.activation);
        let (xhat, _) = harmonize_on(tape, a, eps)?;
        h = affine_on(tape, xhat, &vars.harmony(&format!("dec.{k}.norm"), eps, 0)?)?;
        if cfg.restored(l) {
            let prefix = format!("enc.{l}.norm");
            let stats = queue.take(&prefix)?;
            let hv = vars.harmony(&prefix, eps, cfg.stage_j_poly(l))?;
            h = restore_on(tape, h, &hv, &stats)?;
        }
    }
    queue.finish()?;

    let head = match cfg.head_mode {
        HeadMode::GatedShared => "head".to_string(),
        HeadMode::OracleMultiHead => {
            let d = domain.ok_or_else(|| Error::config("oracle multi-head forward needs the domain id"))?;
            if vars.opt(&format!("head.{d}.weight")).is_none() {
                return Err(Error::config(format!("no head for domain {d}")));
            }
            format!("head.{d}")
        }
    };
    let union_logits = conv_block(tape, vars, &head, h, 0)?;
    let pooled = tape.reduce_spatial(pre_bottleneck.expect("n_stages >= 1"), Reduction::Mean)?;
    Ok(ForwardArtifacts { union_logits, bottleneck_features: pooled, stage_stats, encoder_outputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_examples() {
        let x = Tensor::from_fn(&[1, 2, 1, 1, 2], |i| i as f64 + 1.0);
        let y = modality_adapter(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 8, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let full = modality_adapter(&x, 2).unwrap();
        assert_eq!(&full.data()[..4], x.data());
        assert!(full.data()[4..].iter().all(|&v| v == 1.0));
        assert!(modality_adapter(&x, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        c.validate().unwrap();
        c.n_harmony_pairs = 4;
        assert!(c.validate().is_err());
        c.n_harmony_pairs = 2;
        c.harmony.j_poly = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_layout() {
        let c = BackboneConfig { n_harmony_pairs: 2, ..Default::default() };
        let p = init_params(&c, 4, 2, 0).unwrap();
        assert!(p.contains("enc.0.norm.gamma") && p.contains("enc.1.norm.delta"));
        assert!(!p.contains("enc.2.norm.gamma") && !p.contains("enc.2.norm.lambda"));
        assert_eq!(p.get("dec.1.conv.weight").unwrap().shape(), &[16, 48, 3, 3, 3]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[4, 8, 1, 1, 1]);
        assert_eq!(p.get("gate.weight").unwrap().shape(), &[2, 32]);
        let o = init_params(&BackboneConfig { head_mode: HeadMode::OracleMultiHead, ..c }, 4, 2, 0).unwrap();
        assert!(o.contains("head.1.weight") && !o.contains("gate.weight"));
    }
}
