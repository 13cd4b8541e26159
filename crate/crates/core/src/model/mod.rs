//! Small residual encoders with projection and classifier heads, a named
//! size zoo, and digest-protected checkpoints.

mod checkpoint;
mod config;
mod network;

use std::path::Path;

pub use checkpoint::{Checkpoint, Provenance, Stage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderConfig, InputShape, StageConfig, ZOO};
pub use network::{
    count_parameters, GraphOptions, Head, Network, NetworkNodes, ParameterCount, DEFAULT_PROJ_DIM, INPUT_NAME,
    NUM_CLASSES, RUNNING_STATS_UPDATE,
};

use crate::autodiff::AutodiffError;
use crate::raster::RasterError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint digest does not match its contents")]
    DigestMismatch,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("stage violation: {0}")]
    StageViolation(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io { path: path.display().to_string(), source }
    }
}

/// Saves a checkpoint to `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    checkpoint.save(path)
}

/// Loads and verifies a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path)
}

/// Builds a freshly initialized network.
pub fn build_network(config: EncoderConfig, proj_dim: usize, seed: u64) -> Result<Network, ModelError> {
    Network::new(config, proj_dim, seed)
}
