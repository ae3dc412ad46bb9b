//! Checkpoint file:
//!
//! ```text
//! "UHCKPT1" | header_len u64 LE | header JSON | parameter blobs | moment blobs
//! ```
//!
//! The header lists parameter paths in store order; the blobs follow in that
//! order as `UHTEN1` tensors, then the first and second Adam moments for the
//! paths listed under `moments`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{EpochSummary, MetricRow};
use super::model::Model;
use super::optim::AdamState;
use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::gated::{DomainRegistry, PrototypeBank};
use crate::tensor::{read_blob, write_blob, BlobKind};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"UHCKPT1";
const VERSION: u32 = 1;

/// Model plus the optimizer and bookkeeping needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Last completed epoch.
    pub epoch: usize,
    pub history: Vec<MetricRow>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    config: ExperimentConfig,
    config_hash: String,
    registry: DomainRegistry,
    bank: Option<PrototypeBank>,
    adam_step: u64,
    params: Vec<String>,
    moments: Vec<String>,
    history: Vec<MetricRow>,
    epochs: Vec<EpochSummary>,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let params: Vec<String> = self.model.params.iter().map(|(k, _)| k.clone()).collect();
        let moments: Vec<String> = self.adam.m.keys().cloned().collect();
        let header = Header {
            version: VERSION,
            epoch: self.epoch,
            config: self.model.config.clone(),
            config_hash: self.model.config.hash(),
            registry: self.model.registry.clone(),
            bank: self.model.bank.clone(),
            adam_step: self.adam.step,
            params,
            moments: moments.clone(),
            history: self.history.clone(),
            epochs: self.epochs.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.model.params.iter() {
            write_blob(w, BlobKind::Tensor, t)?;
        }
        for table in [&self.adam.m, &self.adam.v] {
            for k in &moments {
                let t = table.get(k).ok_or_else(|| Error::State(format!("moment '{k}' missing")))?;
                write_blob(w, BlobKind::Tensor, t)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint (magic {:?})", String::from_utf8_lossy(&magic))));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 32 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if h.version != VERSION {
            return Err(Error::Format(format!("checkpoint version {} (expected {VERSION})", h.version)));
        }
        if h.config_hash != h.config.hash() {
            return Err(Error::Format("checkpoint config hash does not match its config".into()));
        }
        let mut params = ParamStore::new();
        for k in &h.params {
            params.insert(k.clone(), read_blob(r, BlobKind::Tensor)?);
        }
        let mut adam = AdamState { step: h.adam_step, ..Default::default() };
        for table in [&mut adam.m, &mut adam.v] {
            for k in &h.moments {
                table.insert(k.clone(), read_blob(r, BlobKind::Tensor)?);
            }
        }
        Ok(Checkpoint {
            model: Model { config: h.config, registry: h.registry, params, bank: h.bank },
            adam,
            epoch: h.epoch,
            history: h.history,
            epochs: h.epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::read(&mut bytes.as_slice())
    }
}
