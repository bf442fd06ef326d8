//! Versioned binary snapshots of the full training state.
//!
//! A checkpoint carries everything resumption needs to reproduce the
//! unbroken run bit for bit: parameters, optimizer moments, sampler
//! statistics, batch cursors, and both RNG streams. The format is binary
//! because the float payload must survive a round trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optimizer::Optimizer;
use super::{BatchCycler, TrainConfig, TrainError};
use crate::numerics::ParamStore;
use crate::sampler::TaskSampler;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub sampler: TaskSampler,
    pub(super) cyclers: Vec<BatchCycler>,
    pub(super) sampling_rng: ChaCha8Rng,
    pub(super) shuffle_rng: ChaCha8Rng,
    pub completed_epochs: usize,
    pub global_step: u64,
    /// Snapshot taken mid-epoch while aborting, rather than at an epoch
    /// boundary.
    pub partial: bool,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        bincode::serialize_into(&mut writer, self).map_err(|e| TrainError::Checkpoint {
            what: format!("write {}: {e}", path.display()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = File::open(path)?;
        let ckpt: Checkpoint = bincode::deserialize_from(BufReader::new(file)).map_err(|e| {
            TrainError::Checkpoint {
                what: format!("read {}: {e}", path.display()),
            }
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint {
                what: format!(
                    "unsupported checkpoint version {} (this build reads {})",
                    ckpt.version, CHECKPOINT_VERSION
                ),
            });
        }
        Ok(ckpt)
    }
}
