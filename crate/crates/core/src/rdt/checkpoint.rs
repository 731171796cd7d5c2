//! Checkpoint container:
//!
//! ```text
//! b"RDTCKPT\0" | u32 version | u64 header_len | JSON header | f32 LE tensors
//! ```
//!
//! Tensors follow the manifest order in the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ablation, RdtConfig, RdtError, RdtModel, Result, TensorSpec};
use crate::diffusion::DiffusionConfig;

const MAGIC: &[u8; 8] = b"RDTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: RdtConfig,
    pub diffusion: DiffusionConfig,
    /// Ablation variant name, or `"custom"` for flag combinations outside
    /// the named variants.
    pub variant: String,
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: Option<f64>,
    /// Learning rate in effect when the checkpoint was written.
    #[serde(default)]
    pub lr: Option<f64>,
    pub tensors: Vec<TensorSpec>,
}

impl CheckpointHeader {
    pub fn new(model: &RdtModel<f32>, diffusion: DiffusionConfig, epoch: usize, step: u64, best_val_loss: Option<f64>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            diffusion,
            variant: model.config().variant().map_or("custom", Ablation::name).to_string(),
            epoch,
            step,
            best_val_loss,
            lr: None,
            tensors: model.tensors().to_vec(),
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &RdtModel<f32>, header: &CheckpointHeader) -> Result<()> {
    if header.tensors != model.tensors() {
        return Err(RdtError::Checkpoint("header manifest does not match the model".into()));
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in model.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RdtError::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(RdtError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    read_header(&mut BufReader::new(File::open(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, RdtModel<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    header.config.validate()?;
    let expected = header.config.param_count();
    let mut bytes = vec![0u8; expected * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| RdtError::Checkpoint(format!("truncated tensor data (expected {expected} values)")))?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(RdtError::Checkpoint("trailing bytes after tensor data".into()));
    }
    let params: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let model = RdtModel::from_params(header.config.clone(), params)?;
    if model.tensors() != header.tensors {
        return Err(RdtError::Checkpoint("tensor manifest does not match the config".into()));
    }
    if !model.is_finite() {
        return Err(RdtError::NonFinite("checkpoint parameters".into()));
    }
    Ok((header, model))
}
