//! Run configuration file.
//!
//! A TOML document with top-level `seed`, `out_dir` and `encoder` keys and
//! one flat table per stage. Unknown keys are errors. Values given on the
//! command line win over the file, and the file wins over built-in
//! defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Encoder zoo name.
    pub encoder: Option<String>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub supervised: StageSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub study: StudySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub unlabeled: Option<usize>,
    pub labeled: Option<usize>,
    pub size: Option<usize>,
    pub class_signal: Option<f64>,
    pub regions: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub fraction: Option<f64>,
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub temperature: Option<f64>,
    pub proj_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub freeze_encoder: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub temperature: Option<f64>,
    /// Encoder zoo name of the student, or `same`.
    pub student: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub k: Option<usize>,
    pub min_confidence: Option<f64>,
}

impl PretrainSection {
    pub fn stage(&self) -> StageSection {
        StageSection {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
        }
    }
}

impl FinetuneSection {
    pub fn stage(&self) -> StageSection {
        StageSection {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
        }
    }
}

impl DistillSection {
    pub fn stage(&self) -> StageSection {
        StageSection {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// First of flag, file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let c = RunConfig::parse(
            "seed = 3\nencoder = \"micro\"\n[pretrain]\nepochs = 2\ntemperature = 0.5\n[finetune]\nfreeze_encoder = false\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.pretrain.epochs, Some(2));
        assert_eq!(c.finetune.freeze_encoder, Some(false));
        assert_eq!(c.distill.student, None);
    }

    #[test]
    fn every_section() {
        let text = r#"
seed = 7
out_dir = "run"
encoder = "tiny"
[data]
manifest = "run/manifest.tsv"
stats = "run/band_stats.tsv"
[synth]
unlabeled = 2000
labeled = 400
size = 32
class_signal = 0.6
regions = ["north", "south"]
[split]
fraction = 0.01
holdout_fraction = 0.03
[pretrain]
epochs = 30
batch_size = 64
lr = 0.0005
optimizer = "adam"
temperature = 0.1
proj_dim = 32
[finetune]
epochs = 100
lr = 0.005
freeze_encoder = true
[supervised]
epochs = 100
lr = 0.005
[distill]
temperature = 2.0
student = "micro"
epochs = 10
batch_size = 64
[study]
k = 100
min_confidence = 0.99
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.synth.regions.as_deref(), Some(&["north".to_string(), "south".to_string()][..]));
        assert_eq!(c.distill.stage().batch_size, Some(64));
        assert_eq!(c.study.min_confidence, Some(0.99));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::parse("sed = 3\n").is_err());
        assert!(RunConfig::parse("[pretrain]\nfreeze_encoder = true\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }
}
