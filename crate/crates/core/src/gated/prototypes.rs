use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Norm below which a finalized prototype is reported as degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

/// Per-domain feature means used for similarity routing.
///
/// Two estimates are kept: an EMA that tracks training as it happens, and
/// exact running sums for the current pass which [`finalize`](Self::finalize)
/// turns into the plain mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    dim: usize,
    momentum: f64,
    prototypes: Vec<Vec<f64>>,
    ema: Vec<Vec<f64>>,
    ema_counts: Vec<u64>,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
    finalized: bool,
}

impl PrototypeBank {
    pub fn new(n_domains: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!("prototype momentum must be in (0, 1), got {momentum}")));
        }
        if n_domains == 0 || dim == 0 {
            return Err(Error::config("prototype bank needs at least one domain and one feature"));
        }
        Ok(PrototypeBank {
            dim,
            momentum,
            prototypes: vec![vec![0.0; dim]; n_domains],
            ema: vec![vec![0.0; dim]; n_domains],
            ema_counts: vec![0; n_domains],
            sums: vec![vec![0.0; dim]; n_domains],
            counts: vec![0; n_domains],
            finalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_domains(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn prototype(&self, domain: usize) -> Result<&[f64]> {
        self.check(domain)?;
        Ok(&self.prototypes[domain])
    }

    fn check(&self, domain: usize) -> Result<()> {
        if domain >= self.n_domains() {
            return Err(Error::config(format!("unknown domain id {domain} (bank has {})", self.n_domains())));
        }
        Ok(())
    }

    /// Clears the exact accumulators; the EMA carries over.
    pub fn begin_pass(&mut self) {
        for s in &mut self.sums {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn update(&mut self, domain: usize, features: &[f64]) -> Result<()> {
        self.check(domain)?;
        if features.len() != self.dim {
            return Err(Error::config(format!(
                "prototype feature length {} does not match bank dimension {}",
                features.len(),
                self.dim
            )));
        }
        let m = self.momentum;
        let ema = &mut self.ema[domain];
        if self.ema_counts[domain] == 0 {
            ema.copy_from_slice(features);
        } else {
            for (e, f) in ema.iter_mut().zip(features) {
                *e = m * *e + (1.0 - m) * f;
            }
        }
        self.ema_counts[domain] += 1;
        for (s, f) in self.sums[domain].iter_mut().zip(features) {
            *s += f;
        }
        self.counts[domain] += 1;
        Ok(())
    }

    /// Replaces each prototype with the exact mean of the features recorded
    /// since [`begin_pass`](Self::begin_pass). Returns the domains whose
    /// prototype came out (near) zero; those get a logged warning.
    pub fn finalize(&mut self) -> Result<Vec<usize>> {
        if let Some(d) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::State(format!("domain {d} has no recorded features to finalize")));
        }
        let mut degenerate = Vec::new();
        for d in 0..self.n_domains() {
            let n = self.counts[d] as f64;
            for (p, s) in self.prototypes[d].iter_mut().zip(&self.sums[d]) {
                *p = s / n;
            }
            if norm(&self.prototypes[d]) < DEGENERATE_NORM {
                log::warn!("prototype of domain {d} is degenerate (near-zero norm)");
                degenerate.push(d);
            }
        }
        self.finalized = true;
        Ok(degenerate)
    }

    /// A finalized copy whose prototypes are the current EMA estimates, for
    /// monitoring before the closing exact pass.
    pub fn ema_snapshot(&self) -> Result<PrototypeBank> {
        if let Some(d) = self.ema_counts.iter().position(|&c| c == 0) {
            return Err(Error::State(format!("domain {d} has no EMA estimate yet")));
        }
        let mut b = self.clone();
        b.prototypes = self.ema.clone();
        b.finalized = true;
        Ok(b)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of `features` to every prototype. A zero-norm feature
/// (or prototype) yields similarity 0.
pub fn similarity(features: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if !bank.is_finalized() {
        return Err(Error::State("prototype bank is not finalized".into()));
    }
    if features.len() != bank.dim {
        return Err(Error::config(format!(
            "feature length {} does not match prototype dimension {}",
            features.len(),
            bank.dim
        )));
    }
    let nf = norm(features);
    Ok(bank
        .prototypes
        .iter()
        .map(|p| {
            let np = norm(p);
            if nf == 0.0 || np == 0.0 {
                return 0.0;
            }
            let dot: f64 = features.iter().zip(p).map(|(a, b)| a * b).sum();
            (dot / (nf * np)).clamp(-1.0, 1.0)
        })
        .collect())
}
