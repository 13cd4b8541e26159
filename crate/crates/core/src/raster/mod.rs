//! Multispectral chip data model, the MSC1 chip format, resampling,
//! normalization, dataset manifests, and the synthetic dataset generator.

mod band;
mod chip;
mod manifest;
mod resample;
mod stats;
mod synth;

use std::path::Path;

pub use band::Band;
pub use chip::{load_chip, read_chip, save_chip, write_chip, MultispectralChip, CHIP_FORMAT_VERSION, CHIP_MAGIC};
pub use manifest::{DatasetManifest, Label, ManifestEntry, Split};
pub use resample::{resample_band, Plane};
pub use stats::{
    band_stats_of_chips, compute_band_stats, denormalize_chip, normalize_chip, BandStats, NormalizedChip, STD_FLOOR,
};
pub use synth::{generate_synthetic_dataset, synthesize, synthesize_chip, SynthParams, SynthSample};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("not an MSC1 chip file")]
    BadMagic,
    #[error("unsupported chip format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated chip: need {expected} bytes, have {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after chip payload")]
    TrailingBytes(usize),
    #[error("unknown band code `{0}`")]
    UnknownBand(String),
    #[error("chip contains a non-finite value")]
    NonFiniteValue,
    #[error("zero-sized dimension")]
    ZeroDimension,
    #[error("invalid chip: {0}")]
    InvalidChip(String),
    #[error("no statistics for band {0}")]
    MissingBandStats(Band),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("chips disagree on bands: {0}")]
    InconsistentBands(String),
    #[error("labeled count {0} is odd; classes must balance")]
    OddLabeledCount(usize),
    #[error("invalid synthetic dataset parameters: {0}")]
    InvalidSynthParams(String),
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("duplicate chip path `{0}` in manifest")]
    DuplicatePath(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RasterError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RasterError::Io { path: path.display().to_string(), source }
    }
}

/// Loads every chip of a manifest, resolving relative paths against `root`.
pub fn load_manifest_chips(manifest: &DatasetManifest, root: &Path) -> Result<Vec<MultispectralChip>, RasterError> {
    manifest.entries.iter().map(|e| load_chip(&root.join(&e.path))).collect()
}
