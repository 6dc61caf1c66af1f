//! Versioned checkpoint documents: named parameter blocks with shapes,
//! optimizer moments, and scheduler state, serialized as JSON. Floats
//! round-trip exactly, so a resumed run is bit-identical to an
//! uninterrupted one.

use crate::matrix::Mat;
use crate::net::{NetParams, BLOCK_COUNT};
use crate::scheduler::SchedulerState;
use crate::trainer::AdamState;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "fbsde-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {found:?} (expected {expected:?})")]
    Format { found: String, expected: String },
    #[error("checkpoint does not match the configured model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl NamedBlock {
    fn from_mat(name: &str, m: &Mat) -> Self {
        NamedBlock {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
        }
    }

    fn to_mat(&self) -> Mat {
        Mat::new(self.rows, self.cols, self.values.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub iteration: u64,
    pub params: Vec<NamedBlock>,
    pub adam_m: Vec<NamedBlock>,
    pub adam_v: Vec<NamedBlock>,
    pub adam_step: u64,
    pub scheduler: SchedulerState,
}

impl Checkpoint {
    pub fn capture(
        iteration: u64,
        params: &NetParams,
        optimizer: &AdamState,
        scheduler: &SchedulerState,
    ) -> Self {
        let names = NetParams::block_names();
        let params_blocks = names
            .iter()
            .zip(params.blocks())
            .map(|(n, b)| NamedBlock::from_mat(n, b))
            .collect();
        let adam_m = names
            .iter()
            .zip(&optimizer.m)
            .map(|(n, b)| NamedBlock::from_mat(n, b))
            .collect();
        let adam_v = names
            .iter()
            .zip(&optimizer.v)
            .map(|(n, b)| NamedBlock::from_mat(n, b))
            .collect();
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            iteration,
            params: params_blocks,
            adam_m,
            adam_v,
            adam_step: optimizer.step,
            scheduler: scheduler.clone(),
        }
    }

    /// Restore `(params, optimizer)` into shapes matching `template`.
    pub fn restore(
        &self,
        template: &NetParams,
    ) -> Result<(NetParams, AdamState), CheckpointError> {
        if self.format != FORMAT_TAG {
            return Err(CheckpointError::Format {
                found: self.format.clone(),
                expected: FORMAT_TAG.to_string(),
            });
        }
        let names = NetParams::block_names();
        if self.params.len() != BLOCK_COUNT {
            return Err(CheckpointError::Mismatch(format!(
                "expected {BLOCK_COUNT} parameter blocks, found {}",
                self.params.len()
            )));
        }
        let mut params = template.clone();
        for (idx, block) in params.blocks_mut().into_iter().enumerate() {
            let stored = &self.params[idx];
            if stored.name != names[idx] {
                return Err(CheckpointError::Mismatch(format!(
                    "block {idx} is {:?}, expected {:?}",
                    stored.name, names[idx]
                )));
            }
            if (stored.rows, stored.cols) != block.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "block {:?} has shape {}x{}, expected {}x{}",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    block.rows(),
                    block.cols()
                )));
            }
            *block = stored.to_mat();
        }
        let restore_moments = |blocks: &[NamedBlock]| -> Result<Vec<Mat>, CheckpointError> {
            if blocks.len() != BLOCK_COUNT {
                return Err(CheckpointError::Mismatch(
                    "optimizer moment block count mismatch".into(),
                ));
            }
            Ok(blocks.iter().map(NamedBlock::to_mat).collect())
        };
        let optimizer = AdamState {
            m: restore_moments(&self.adam_m)?,
            v: restore_moments(&self.adam_v)?,
            step: self.adam_step,
        };
        Ok((params, optimizer))
    }

    /// Atomic write: serialize to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT_TAG {
            return Err(CheckpointError::Format {
                found: ck.format,
                expected: FORMAT_TAG.to_string(),
            });
        }
        Ok(ck)
    }
}

/// Write the full contents or nothing: temp file in the same directory,
/// then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
