use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::backbone::{forward, init_params, HeadMode, ParamStore};
use crate::error::{Error, Result};
use crate::gated::{
    argmax, infer_routing, mask_logits, mask_logits_by_domain, DomainRegistry, GateParams, PrototypeBank,
};
use crate::synth::{extract, Sample};
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Route by the gate and prototypes; the domain id is never consulted.
    #[default]
    DatasetFree,
    /// Feed the true domain id (head selection and channel mask).
    Oracle,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset_free" | "dataset-free" => Ok(EvalMode::DatasetFree),
            "oracle" => Ok(EvalMode::Oracle),
            _ => Err(Error::config(format!("unknown eval mode '{s}' (dataset_free | oracle)"))),
        }
    }
}

/// Trained (or freshly initialized) network plus everything inference needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ExperimentConfig,
    pub registry: DomainRegistry,
    pub params: ParamStore,
    /// `None` for oracle multi-head models.
    pub bank: Option<PrototypeBank>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Union channel per voxel.
    pub labels: Vec<usize>,
    /// Argmax domain of the routing weights (dataset-free mode only).
    pub inferred_domain: Option<usize>,
    pub routing: Option<Vec<f64>>,
}

impl Model {
    pub fn new(config: ExperimentConfig, registry: DomainRegistry) -> Result<Self> {
        config.validate()?;
        let b = &config.backbone;
        let params = init_params(b, registry.n_classes(), registry.n_domains(), config.train.seed)?
            .cast(config.train.dtype);
        let bank = match b.head_mode {
            HeadMode::GatedShared => {
                Some(PrototypeBank::new(registry.n_domains(), b.feature_dim(), config.head.momentum)?)
            }
            HeadMode::OracleMultiHead => None,
        };
        Ok(Model { config, registry, params, bank })
    }

    pub fn gate_params(&self) -> Result<GateParams> {
        Ok(GateParams { w: self.params.get("gate.weight")?.clone(), b: self.params.get("gate.bias")?.clone() })
    }

    /// Union logits `[1, C, h, w, d]` and the pooled feature of one volume.
    pub fn logits_and_features(&self, volume: &Tensor, domain: Option<usize>) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = GradTape::new();
        let vars = self.params.register_frozen(&mut tape);
        let mut shape = vec![1];
        shape.extend_from_slice(volume.shape());
        let x = tape.constant(volume.reshape(&shape)?.cast(self.config.train.dtype));
        let art = forward(&mut tape, &vars, &self.config.backbone, x, domain)?;
        Ok((tape.value(art.union_logits).clone(), tape.value(art.bottleneck_features).data().to_vec()))
    }

    /// The bank used for routing: the finalized one, or the current EMA
    /// estimate when training has not finished.
    pub fn routing_bank(&self) -> Result<PrototypeBank> {
        let bank = self.bank.as_ref().ok_or_else(|| Error::config("oracle multi-head models have no prototypes"))?;
        if bank.is_finalized() {
            Ok(bank.clone())
        } else {
            bank.ema_snapshot()
        }
    }

    pub fn predict(&self, volume: &Tensor, mode: EvalMode, true_domain: usize) -> Result<Prediction> {
        let bank = match mode {
            EvalMode::DatasetFree => Some(self.routing_bank()?),
            EvalMode::Oracle => None,
        };
        self.predict_with(volume, mode, true_domain, bank.as_ref())
    }

    pub(crate) fn predict_with(
        &self,
        volume: &Tensor,
        mode: EvalMode,
        true_domain: usize,
        bank: Option<&PrototypeBank>,
    ) -> Result<Prediction> {
        self.registry.domain(true_domain)?;
        let (masked, inferred, routing) = match mode {
            EvalMode::Oracle => {
                let (logits, _) = self.logits_and_features(volume, Some(true_domain))?;
                (mask_logits_by_domain(&logits, &[true_domain], &self.registry)?, None, None)
            }
            EvalMode::DatasetFree => {
                if self.config.backbone.head_mode == HeadMode::OracleMultiHead {
                    return Err(Error::config("dataset-free evaluation needs the gated shared head"));
                }
                let bank = bank.ok_or_else(|| Error::State("dataset-free prediction without prototypes".into()))?;
                let (logits, phi) = self.logits_and_features(volume, None)?;
                let r = infer_routing(&phi, &self.gate_params()?, bank, &self.config.head)?;
                let (masked, d) =
                    mask_logits(&logits, std::slice::from_ref(&r), &self.registry, self.config.head.mask_mode)?;
                (masked, Some(d[0]), Some(r))
            }
        };
        let (_, c, p) = masked.feature_dims()?;
        let z = masked.data();
        let labels = (0..p)
            .map(|v| argmax(&(0..c).map(|k| z[k * p + v]).collect::<Vec<_>>()))
            .collect();
        Ok(Prediction { labels, inferred_domain: inferred, routing })
    }
}

/// The part of a sample the network sees at inference: the whole volume
/// when its extents fit the stage count, otherwise a centered `patch` crop.
pub fn network_view(sample: &Sample, divisor: usize, patch: usize) -> Sample {
    let shape = sample.shape();
    if shape.iter().all(|e| e % divisor == 0) {
        return sample.clone();
    }
    let ext = shape.map(|e| patch.min(e - e % divisor).max(divisor.min(e)));
    let origin = [0, 1, 2].map(|a| (shape[a] - ext[a]) / 2);
    extract(sample, origin, ext)
}
