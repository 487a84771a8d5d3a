//! Binary checkpoint format.
//!
//! ```text
//! "N4N\0CKPT"                 8-byte magic
//! u32 LE                      header length in bytes
//! JSON header (UTF-8)         config, training state, blob table
//! f32 LE blobs                parameter values and Adam moments
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, ArchConfig, NetError, Network, Result};
use crate::io_util::write_atomic;
use crate::nn3d::{AdamState, Param, PlateauScheduler};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"N4N\0CKPT";

/// One epoch of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

/// Everything needed to rebuild a network and resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ArchConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochStats>,
    pub params: Vec<Param<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    trainable: bool,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ArchConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    scheduler: PlateauScheduler,
    history: Vec<EpochStats>,
    params: Vec<ParamEntry>,
    blobs: Vec<BlobEntry>,
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Fresh checkpoint of an untrained network.
    pub fn from_network(net: &Network<f32>) -> Self {
        let cfg = net.config().clone();
        Checkpoint {
            scheduler: PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.patience),
            config: cfg,
            epoch: 0,
            best_val_loss: None,
            history: Vec::new(),
            params: net.snapshot(),
        }
    }

    /// Rebuild the network with these parameters and optimizer state.
    pub fn network(&self) -> Result<Network<f32>> {
        let mut net = build::<f32>(&self.config)?;
        net.load_state(&self.params)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for p in &self.params {
            for (suffix, data) in [("", &p.value), ("#adam_m", &p.adam.m), ("#adam_v", &p.adam.v)] {
                blobs.push(BlobEntry {
                    name: format!("{}{suffix}", p.name),
                    dtype: "f32".into(),
                    shape: p.shape.clone(),
                    offset: payload.len(),
                });
                for v in data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            format_version: 1,
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            scheduler: self.scheduler,
            history: self.history.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    adam_step: p.adam.step,
                })
                .collect(),
            blobs,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let payload = &bytes[12 + hlen..];

        let read_blob = |entry: &BlobEntry, expect: &str| -> Result<Vec<f32>> {
            if entry.name != expect || entry.dtype != "f32" {
                return Err(bad(format!("expected f32 blob {expect}, found {} {}", entry.dtype, entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = payload
                .get(entry.offset..entry.offset + 4 * n)
                .ok_or_else(|| bad(format!("blob {} out of range", entry.name)))?;
            Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };

        if header.blobs.len() != 3 * header.params.len() {
            return Err(bad("blob table does not match parameter list"));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for (pe, blobs) in header.params.iter().zip(header.blobs.chunks_exact(3)) {
            let value = read_blob(&blobs[0], &pe.name)?;
            let m = read_blob(&blobs[1], &format!("{}#adam_m", pe.name))?;
            let v = read_blob(&blobs[2], &format!("{}#adam_v", pe.name))?;
            let mut p = Param::new(pe.name.clone(), blobs[0].shape.clone(), value, pe.trainable);
            p.adam = AdamState {
                m,
                v,
                step: pe.adam_step,
            };
            params.push(p);
        }
        let ck = Checkpoint {
            config: header.config,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
            scheduler: header.scheduler,
            history: header.history,
            params,
        };
        // reject parameter sets that do not fit the declared architecture
        build::<f32>(&ck.config)?.load_values(&ck.params)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
