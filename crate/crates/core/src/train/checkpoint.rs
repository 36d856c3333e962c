use std::path::Path;

use semloc_autograd::{LayoutEntry, ParamStore};
use serde::{Deserialize, Serialize};

use super::config::Method;
use super::data::CoordNormalizer;
use crate::binio;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::sim::TensorSpec;

pub const CHECKPOINT_FORMAT: &str = "semloc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `manifest.json` of a checkpoint directory. `params.bin` holds every
/// value of `layout` as little-endian f64: parameters in name order, then
/// batchnorm buffers in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub method: Method,
    pub seed: u64,
    /// Epoch (1-based) whose parameters were kept.
    pub epoch: usize,
    /// Optimizer steps taken when the parameters were kept.
    pub step: usize,
    /// Optimizer velocity is not stored.
    pub optimizer_state: bool,
    pub normalizer: CoordNormalizer,
    pub val_rmse: f64,
    pub val_accuracy: f64,
    pub layout: Vec<LayoutEntry>,
    pub params: TensorSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<()> {
        binio::create_dir(dir)?;
        binio::write_f64(&dir.join(&self.manifest.params.file), &self.store.to_flat())?;
        binio::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: CheckpointManifest = binio::read_json(&path)?;
        let bad = |reason: String| Error::InvalidData { path: path.clone(), reason };
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("format `{}` is not `{CHECKPOINT_FORMAT}`", manifest.format)));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let total: usize = manifest.layout.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if manifest.params.numel() != total {
            return Err(bad("params shape disagrees with layout".into()));
        }
        let flat = binio::read_f64(&dir.join(&manifest.params.file), total)?;
        let store = ParamStore::from_flat(&manifest.layout, &flat)?;
        Ok(Self { manifest, store })
    }
}
