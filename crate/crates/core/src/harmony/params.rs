use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_J_POLY: usize = 2;
pub const MAX_J_POLY: usize = 4;

/// Learnable coefficients of one harmonization layer.
///
/// `w`, `b` are shared by the affine stage and the paired restoration stage.
/// `lambda` feeds the affine polynomial, `gamma`/`delta` the restoration
/// numerator and denominator. The polynomial tensors are `[C, j_poly]` and
/// absent when `j_poly == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonyParams {
    pub w: Tensor,
    pub b: Tensor,
    pub lambda: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub delta: Option<Tensor>,
    pub eps: f64,
    pub j_poly: usize,
}

impl HarmonyParams {
    /// `w = 1`, `b = 0`, all polynomial coefficients zero: the full
    /// harmonize -> affine -> restore stack round-trips its input.
    pub fn identity(channels: usize, j_poly: usize, eps: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("harmony layer needs at least one channel"));
        }
        let poly = || (j_poly > 0).then(|| Tensor::zeros(&[channels, j_poly]));
        let p = HarmonyParams {
            w: Tensor::ones(&[channels]),
            b: Tensor::zeros(&[channels]),
            lambda: poly(),
            gamma: poly(),
            delta: poly(),
            eps,
            j_poly,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.j_poly > MAX_J_POLY {
            return Err(Error::config(format!("j_poly must be in 0..={MAX_J_POLY}, got {}", self.j_poly)));
        }
        let c = self.channels();
        if self.w.shape() != [c] || self.b.shape() != [c] {
            return Err(shape_mismatch("harmony scale/shift", self.w.shape(), self.b.shape()));
        }
        for (name, t) in [("lambda", &self.lambda), ("gamma", &self.gamma), ("delta", &self.delta)] {
            match (t, self.j_poly) {
                (None, 0) => {}
                (Some(t), j) if j > 0 && t.shape() == [c, j] => {}
                (Some(t), j) => return Err(shape_mismatch(name, t.shape(), &[c, j])),
                (None, j) => return Err(Error::config(format!("{name} missing for j_poly = {j}"))),
            }
        }
        Ok(())
    }

    pub(crate) fn coefs(&self) -> Coefs<'_> {
        Coefs {
            w: self.w.data(),
            b: self.b.data(),
            lambda: self.lambda.as_ref().map(|t| t.data()),
            gamma: self.gamma.as_ref().map(|t| t.data()),
            delta: self.delta.as_ref().map(|t| t.data()),
            eps: self.eps,
            j_poly: self.j_poly,
        }
    }
}

/// Borrowed coefficient view used by the kernels, so the tape can hand in
/// raw input tensors without rebuilding a [`HarmonyParams`].
#[derive(Clone, Copy)]
pub(crate) struct Coefs<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub lambda: Option<&'a [f64]>,
    pub gamma: Option<&'a [f64]>,
    pub delta: Option<&'a [f64]>,
    pub eps: f64,
    pub j_poly: usize,
}

impl Coefs<'_> {
    pub fn row<'b>(&self, t: Option<&'b [f64]>, c: usize) -> &'b [f64] {
        match t {
            Some(d) => &d[c * self.j_poly..(c + 1) * self.j_poly],
            None => &[],
        }
    }
}

/// Per-`(sample, channel)` spatial mean and `sqrt(var + eps)`, each `[N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl InstanceStats {
    pub fn batch(&self) -> usize {
        self.mu.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.mu.dim(1)
    }
}

/// Settings shared by every harmony layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonyConfig {
    pub eps: f64,
    pub j_poly: usize,
}

impl Default for HarmonyConfig {
    fn default() -> Self {
        HarmonyConfig { eps: DEFAULT_EPS, j_poly: DEFAULT_J_POLY }
    }
}
