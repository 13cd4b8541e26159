use std::fmt;
use std::str::FromStr;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    /// The first block of the stage halves the spatial extent.
    pub downsample: bool,
}

/// Shape of a residual encoder: a 3×3 stem, a list of stages of residual
/// blocks, global average pooling, and a linear embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input: InputShape,
    pub stem_channels: usize,
    /// 1 or 2.
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub embedding_dim: usize,
}

pub const ZOO: [&str; 5] = ["micro", "tiny", "small", "medium", "large"];

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let InputShape { height, width, bands } = self.input;
        if height == 0 || width == 0 || bands == 0 {
            return bad(format!("input {height}×{width}×{bands} has a zero extent"));
        }
        if self.stem_channels == 0 {
            return bad("stem needs at least one channel".into());
        }
        if self.stem_stride != 1 && self.stem_stride != 2 {
            return bad(format!("stem stride {} (must be 1 or 2)", self.stem_stride));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let mut prev = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return bad(format!("stage {i} has no blocks"));
            }
            if s.channels < prev {
                return bad(format!("stage {i} narrows channels {prev} → {}", s.channels));
            }
            prev = s.channels;
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        Ok(())
    }

    /// A named configuration from the default zoo, for the given input.
    pub fn zoo(name: &str, input: InputShape) -> Result<Self, ModelError> {
        let stage = |blocks, channels, downsample| StageConfig { blocks, channels, downsample };
        let (stem, stages, embed) = match name {
            "micro" => (4, vec![stage(1, 4, false), stage(1, 8, true)], 16),
            "tiny" => (8, vec![stage(1, 8, false), stage(1, 16, true)], 32),
            "small" => (16, vec![stage(1, 16, false), stage(1, 32, true)], 64),
            "medium" => (16, vec![stage(1, 32, false), stage(1, 64, true)], 64),
            "large" => (32, vec![stage(2, 64, false), stage(1, 128, true)], 128),
            other => {
                return Err(ModelError::InvalidConfig(format!("unknown encoder `{other}` (zoo: {})", ZOO.join(", "))))
            }
        };
        let config = Self { input, stem_channels: stem, stem_stride: 2, stages, embedding_dim: embed };
        config.validate()?;
        Ok(config)
    }

    /// Every channel count multiplied by `factor`.
    pub fn widened(&self, factor: usize) -> Self {
        Self {
            stem_channels: self.stem_channels * factor,
            stages: self.stages.iter().map(|s| StageConfig { channels: s.channels * factor, ..*s }).collect(),
            ..self.clone()
        }
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }
}

/// Canonical text form, one `key=value` per line, e.g.
/// `input=32x32x10`, `stem=8/2`, `stage=1x16/down`, `embed=32`.
impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let InputShape { height, width, bands } = self.input;
        writeln!(f, "input={height}x{width}x{bands}")?;
        writeln!(f, "stem={}/{}", self.stem_channels, self.stem_stride)?;
        for s in &self.stages {
            writeln!(f, "stage={}x{}{}", s.blocks, s.channels, if s.downsample { "/down" } else { "" })?;
        }
        writeln!(f, "embed={}", self.embedding_dim)
    }
}

impl FromStr for EncoderConfig {
    type Err = ModelError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| ModelError::InvalidConfig(m);
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("`{v}`: {e}")));
        let (mut input, mut stem, mut embed) = (None, None, None);
        let mut stages = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("`{line}` is not key=value")))?;
            match key {
                "input" => {
                    let dims: Vec<&str> = value.split('x').collect();
                    if dims.len() != 3 {
                        return Err(bad(format!("input `{value}`")));
                    }
                    input = Some(InputShape { height: num(dims[0])?, width: num(dims[1])?, bands: num(dims[2])? });
                }
                "stem" => {
                    let (c, s) = value.split_once('/').ok_or_else(|| bad(format!("stem `{value}`")))?;
                    stem = Some((num(c)?, num(s)?));
                }
                "stage" => {
                    let (body, downsample) = match value.strip_suffix("/down") {
                        Some(b) => (b, true),
                        None => (value, false),
                    };
                    let (b, c) = body.split_once('x').ok_or_else(|| bad(format!("stage `{value}`")))?;
                    stages.push(StageConfig { blocks: num(b)?, channels: num(c)?, downsample });
                }
                "embed" => embed = Some(num(value)?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let (stem_channels, stem_stride) = stem.ok_or_else(|| bad("missing stem".into()))?;
        let config = Self {
            input: input.ok_or_else(|| bad("missing input".into()))?,
            stem_channels,
            stem_stride,
            stages,
            embedding_dim: embed.ok_or_else(|| bad("missing embed".into()))?,
        };
        config.validate()?;
        Ok(config)
    }
}
