use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harmony::{HarmonyParams, HarmonyVars};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{DType, Tensor};

/// Named parameter tensors keyed by layer path (`enc.0.conv.weight`, ...).
/// Iteration order is the lexical path order, which fixes the order of
/// initialization, optimizer updates and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.map.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map.get(path).ok_or_else(|| Error::State(format!("missing parameter '{path}'")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map.get_mut(path).ok_or_else(|| Error::State(format!("missing parameter '{path}'")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast(&self, dtype: DType) -> ParamStore {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast(dtype))).collect() }
    }

    /// Harmony parameters stored under `prefix` (`prefix.w`, `prefix.b`,
    /// optional `prefix.lambda`/`gamma`/`delta`).
    pub fn harmony(&self, prefix: &str, eps: f64, j_poly: usize) -> Result<HarmonyParams> {
        let opt = |name: &str| self.map.get(&format!("{prefix}.{name}")).cloned();
        let p = HarmonyParams {
            w: self.get(&format!("{prefix}.w"))?.clone(),
            b: self.get(&format!("{prefix}.b"))?.clone(),
            lambda: opt("lambda"),
            gamma: opt("gamma"),
            delta: opt("delta"),
            eps,
            j_poly,
        };
        Ok(p)
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut GradTape) -> ParamVars {
        ParamVars { map: self.map.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect() }
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn register_frozen(&self, tape: &mut GradTape) -> ParamVars {
        ParamVars { map: self.map.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }
}

/// Tape handles of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_map(map: BTreeMap<String, Var>) -> Self {
        ParamVars { map }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.map.get(path).copied().ok_or_else(|| Error::State(format!("missing parameter '{path}'")))
    }

    pub fn opt(&self, path: &str) -> Option<Var> {
        self.map.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn harmony(&self, prefix: &str, eps: f64, j_poly: usize) -> Result<HarmonyVars> {
        Ok(HarmonyVars {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
            lambda: self.opt(&format!("{prefix}.lambda")),
            gamma: self.opt(&format!("{prefix}.gamma")),
            delta: self.opt(&format!("{prefix}.delta")),
            eps,
            j_poly,
        })
    }

    /// Gradients keyed by path; parameters the loss never reached are absent.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.map.iter().filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g))).collect()
    }
}
