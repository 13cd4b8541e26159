//! Stochastic view generation for contrastive pretraining.
//!
//! Each view is one geometric step followed by one photometric step. All
//! parameters are drawn from a stream keyed by `(seed, stage, epoch,
//! sample, view)`, so a view can be regenerated from its key alone, and a
//! sampled [`AugmentationSpec`] carries everything needed to replay it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::raster::{resample_band, MultispectralChip, Plane, RasterError};
use crate::rng::stream;

pub const CROP_FRACTION: (f64, f64) = (0.6, 1.0);
pub const BRIGHTNESS: (f64, f64) = (0.8, 1.2);
pub const CONTRAST: (f64, f64) = (0.8, 1.2);
pub const NOISE_SIGMA: (f64, f64) = (0.0, 0.05);
pub const BLUR_SIGMA: (f64, f64) = (0.5, 1.5);
/// Largest cutout side as a fraction of the chip side.
pub const CUTOUT_MAX: f64 = 0.25;
const CUTOUT_MIN_SAMPLED: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("parameter out of range: {0}")]
    SpecOutOfRange(String),
    #[error("augmentation spec has no steps")]
    EmptySpec,
    #[error("rotation needs a square chip, got {0}×{1}")]
    NonSquareChip(usize, usize),
    #[error("cannot parse augmentation spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// One transform with its parameters. Offsets are fractions of the slack
/// left after the crop or cutout is placed, so `0` is top/left and `1` is
/// bottom/right.
#[derive(Clone, Debug, PartialEq)]
pub enum TransformStep {
    CropResize {
        fraction: f64,
        row: f64,
        col: f64,
    },
    FlipH,
    FlipV,
    Rotate90 {
        k: u8,
    },
    BandBrightness {
        scale: f64,
    },
    BandContrast {
        factor: f64,
    },
    /// The noise field is drawn from `ChaCha8Rng::seed_from_u64(seed)`.
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
    GaussianBlur {
        sigma: f64,
    },
    Cutout {
        size: f64,
        row: f64,
        col: f64,
    },
}

pub const GEOMETRIC_KINDS: [&str; 4] = ["crop_resize", "flip_h", "flip_v", "rotate90"];
pub const PHOTOMETRIC_KINDS: [&str; 5] =
    ["band_brightness", "band_contrast", "gaussian_noise", "gaussian_blur", "cutout"];

impl TransformStep {
    pub fn kind(&self) -> &'static str {
        match self {
            TransformStep::CropResize { .. } => "crop_resize",
            TransformStep::FlipH => "flip_h",
            TransformStep::FlipV => "flip_v",
            TransformStep::Rotate90 { .. } => "rotate90",
            TransformStep::BandBrightness { .. } => "band_brightness",
            TransformStep::BandContrast { .. } => "band_contrast",
            TransformStep::GaussianNoise { .. } => "gaussian_noise",
            TransformStep::GaussianBlur { .. } => "gaussian_blur",
            TransformStep::Cutout { .. } => "cutout",
        }
    }

    pub fn is_geometric(&self) -> bool {
        GEOMETRIC_KINDS.contains(&self.kind())
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let within = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(AugmentError::SpecOutOfRange(format!("{}.{name}={v} outside [{lo}, {hi}]", self.kind())))
            }
        };
        match *self {
            TransformStep::CropResize { fraction, row, col } => {
                within("fraction", fraction, CROP_FRACTION)?;
                within("row", row, (0.0, 1.0))?;
                within("col", col, (0.0, 1.0))
            }
            TransformStep::FlipH | TransformStep::FlipV => Ok(()),
            TransformStep::Rotate90 { k } => within("k", k as f64, (1.0, 3.0)),
            TransformStep::BandBrightness { scale } => within("scale", scale, BRIGHTNESS),
            TransformStep::BandContrast { factor } => within("factor", factor, CONTRAST),
            TransformStep::GaussianNoise { sigma, .. } => within("sigma", sigma, NOISE_SIGMA),
            TransformStep::GaussianBlur { sigma } => within("sigma", sigma, BLUR_SIGMA),
            TransformStep::Cutout { size, row, col } => {
                if !(size > 0.0 && size <= CUTOUT_MAX) {
                    return Err(AugmentError::SpecOutOfRange(format!("cutout.size={size} outside (0, {CUTOUT_MAX}]")));
                }
                within("row", row, (0.0, 1.0))?;
                within("col", col, (0.0, 1.0))
            }
        }
    }

    fn params(&self) -> Vec<(&'static str, String)> {
        match *self {
            TransformStep::CropResize { fraction, row, col } => {
                vec![("fraction", fraction.to_string()), ("row", row.to_string()), ("col", col.to_string())]
            }
            TransformStep::FlipH | TransformStep::FlipV => Vec::new(),
            TransformStep::Rotate90 { k } => vec![("k", k.to_string())],
            TransformStep::BandBrightness { scale } => vec![("scale", scale.to_string())],
            TransformStep::BandContrast { factor } => vec![("factor", factor.to_string())],
            TransformStep::GaussianNoise { sigma, seed } => {
                vec![("sigma", sigma.to_string()), ("seed", seed.to_string())]
            }
            TransformStep::GaussianBlur { sigma } => vec![("sigma", sigma.to_string())],
            TransformStep::Cutout { size, row, col } => {
                vec![("size", size.to_string()), ("row", row.to_string()), ("col", col.to_string())]
            }
        }
    }
}

impl fmt::Display for TransformStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())?;
        let params = self.params();
        if !params.is_empty() {
            let joined: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, ":{}", joined.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for TransformStep {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: String| AugmentError::Parse(msg);
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut fields = std::collections::BTreeMap::new();
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("`{pair}` is not key=value")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("{kind}: `{k}` given twice")));
            }
        }
        let mut take = |name: &str| -> Result<&str, AugmentError> {
            fields.remove(name).ok_or_else(|| bad(format!("{kind}: missing `{name}`")))
        };
        let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}")));
        let step = match kind {
            "crop_resize" => TransformStep::CropResize {
                fraction: num(take("fraction")?)?,
                row: num(take("row")?)?,
                col: num(take("col")?)?,
            },
            "flip_h" => TransformStep::FlipH,
            "flip_v" => TransformStep::FlipV,
            "rotate90" => {
                let k = take("k")?;
                TransformStep::Rotate90 { k: k.parse().map_err(|e| bad(format!("`{k}`: {e}")))? }
            }
            "band_brightness" => TransformStep::BandBrightness { scale: num(take("scale")?)? },
            "band_contrast" => TransformStep::BandContrast { factor: num(take("factor")?)? },
            "gaussian_noise" => {
                let sigma = num(take("sigma")?)?;
                let seed = take("seed")?;
                TransformStep::GaussianNoise { sigma, seed: seed.parse().map_err(|e| bad(format!("`{seed}`: {e}")))? }
            }
            "gaussian_blur" => TransformStep::GaussianBlur { sigma: num(take("sigma")?)? },
            "cutout" => {
                TransformStep::Cutout { size: num(take("size")?)?, row: num(take("row")?)?, col: num(take("col")?)? }
            }
            other => return Err(bad(format!("unknown transform `{other}`"))),
        };
        if let Some(extra) = fields.keys().next() {
            return Err(bad(format!("{kind}: unexpected `{extra}`")));
        }
        step.validate()?;
        Ok(step)
    }
}

/// An ordered transform chain; serializes as `kind:k=v,...|kind:...`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    steps: Vec<TransformStep>,
}

impl AugmentationSpec {
    pub fn new(steps: Vec<TransformStep>) -> Result<Self, AugmentError> {
        if steps.is_empty() {
            return Err(AugmentError::EmptySpec);
        }
        for s in &steps {
            s.validate()?;
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{step}")?;
        }
        Ok(())
    }
}

impl FromStr for AugmentationSpec {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let steps = s.trim().split('|').map(str::parse).collect::<Result<Vec<_>, _>>()?;
        Self::new(steps)
    }
}

/// Key of the stream from which a view's augmentation is drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationRng {
    pub seed: u64,
    pub stage: String,
    pub epoch: u64,
    pub sample_index: u64,
    pub view_index: u64,
}

impl AugmentationRng {
    pub fn new(seed: u64, stage: &str, epoch: u64, sample_index: u64, view_index: u64) -> Self {
        Self { seed, stage: stage.to_string(), epoch, sample_index, view_index }
    }

    pub fn with_view(&self, view_index: u64) -> Self {
        Self { view_index, ..self.clone() }
    }

    pub fn stream(&self) -> ChaCha8Rng {
        stream(self.seed, &format!("augment/{}", self.stage), &[self.epoch, self.sample_index, self.view_index])
    }
}

/// Draws one geometric and one photometric step from `key`'s stream.
pub fn sample_augmentation(key: &AugmentationRng) -> AugmentationSpec {
    let mut rng = key.stream();
    let geometric = match rng.gen_range(0..GEOMETRIC_KINDS.len()) {
        0 => TransformStep::CropResize {
            fraction: rng.gen_range(CROP_FRACTION.0..=CROP_FRACTION.1),
            row: rng.gen_range(0.0..=1.0),
            col: rng.gen_range(0.0..=1.0),
        },
        1 => TransformStep::FlipH,
        2 => TransformStep::FlipV,
        _ => TransformStep::Rotate90 { k: rng.gen_range(1..=3) },
    };
    let photometric = match rng.gen_range(0..PHOTOMETRIC_KINDS.len()) {
        0 => TransformStep::BandBrightness { scale: rng.gen_range(BRIGHTNESS.0..=BRIGHTNESS.1) },
        1 => TransformStep::BandContrast { factor: rng.gen_range(CONTRAST.0..=CONTRAST.1) },
        2 => TransformStep::GaussianNoise { sigma: rng.gen_range(NOISE_SIGMA.0..=NOISE_SIGMA.1), seed: rng.gen() },
        3 => TransformStep::GaussianBlur { sigma: rng.gen_range(BLUR_SIGMA.0..=BLUR_SIGMA.1) },
        _ => TransformStep::Cutout {
            size: rng.gen_range(CUTOUT_MIN_SAMPLED..=CUTOUT_MAX),
            row: rng.gen_range(0.0..=1.0),
            col: rng.gen_range(0.0..=1.0),
        },
    };
    AugmentationSpec { steps: vec![geometric, photometric] }
}

/// Views 0 and 1 for the sample identified by `key` (its view index is ignored).
pub fn sample_augmentation_pair(key: &AugmentationRng) -> (AugmentationSpec, AugmentationSpec) {
    (sample_augmentation(&key.with_view(0)), sample_augmentation(&key.with_view(1)))
}

/// Applies every step in order. Spatial steps move all bands together;
/// photometric steps use the same parameters for every band.
pub fn apply_augmentation(
    chip: &MultispectralChip,
    spec: &AugmentationSpec,
) -> Result<MultispectralChip, AugmentError> {
    let mut out = chip.clone();
    for step in &spec.steps {
        step.validate()?;
        out = apply_step(&out, step)?;
    }
    Ok(out)
}

fn map_planes(
    chip: &MultispectralChip,
    mut f: impl FnMut(usize, &[f32]) -> Result<Vec<f32>, AugmentError>,
) -> Result<MultispectralChip, AugmentError> {
    let mut data = Vec::with_capacity(chip.data().len());
    for b in 0..chip.bands().len() {
        data.extend(f(b, chip.plane(b))?);
    }
    Ok(chip.with_data(data)?)
}

/// Pixel offset for a placement fraction within `slack` spare pixels.
fn offset(fraction: f64, slack: usize) -> usize {
    ((fraction * slack as f64).round() as usize).min(slack)
}

fn apply_step(chip: &MultispectralChip, step: &TransformStep) -> Result<MultispectralChip, AugmentError> {
    let (h, w) = (chip.height(), chip.width());
    match *step {
        TransformStep::CropResize { fraction, row, col } => {
            let ch = ((fraction * h as f64).round() as usize).clamp(1, h);
            let cw = ((fraction * w as f64).round() as usize).clamp(1, w);
            let (r0, c0) = (offset(row, h - ch), offset(col, w - cw));
            map_planes(chip, |_, p| {
                let mut crop = Vec::with_capacity(ch * cw);
                for r in r0..r0 + ch {
                    crop.extend_from_slice(&p[r * w + c0..r * w + c0 + cw]);
                }
                Ok(resample_band(&Plane::new(ch, cw, crop)?, h, w)?.data)
            })
        }
        TransformStep::FlipH => {
            map_planes(chip, |_, p| Ok(p.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()))
        }
        TransformStep::FlipV => map_planes(chip, |_, p| Ok(p.chunks(w).rev().flatten().copied().collect())),
        TransformStep::Rotate90 { k } => {
            if h != w {
                return Err(AugmentError::NonSquareChip(h, w));
            }
            let n = h;
            map_planes(chip, |_, p| {
                let mut cur = p.to_vec();
                for _ in 0..k {
                    // Counter-clockwise: out[r][c] = in[c][n-1-r].
                    let mut next = vec![0.0; n * n];
                    for r in 0..n {
                        for c in 0..n {
                            next[r * n + c] = cur[c * n + (n - 1 - r)];
                        }
                    }
                    cur = next;
                }
                Ok(cur)
            })
        }
        TransformStep::BandBrightness { scale } => {
            map_planes(chip, |_, p| Ok(p.iter().map(|&v| (v as f64 * scale) as f32).collect()))
        }
        TransformStep::BandContrast { factor } => map_planes(chip, |b, p| {
            let mean = chip.plane_mean(b);
            Ok(p.iter().map(|&v| ((v as f64 - mean) * factor + mean) as f32).collect())
        }),
        TransformStep::GaussianNoise { sigma, seed } => {
            let field = noise_field(seed, chip.data().len());
            let data = chip.data().iter().zip(field).map(|(&v, z)| (v as f64 + sigma * z) as f32).collect();
            Ok(chip.with_data(data)?)
        }
        TransformStep::GaussianBlur { sigma } => {
            let k: Vec<f64> = [-1.0f64, 0.0, 1.0].iter().map(|d| (-d * d / (2.0 * sigma * sigma)).exp()).collect();
            let norm: f64 = k.iter().sum();
            let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
            map_planes(chip, |_, p| {
                let at = |r: isize, c: isize| {
                    let r = r.clamp(0, h as isize - 1) as usize;
                    let c = c.clamp(0, w as isize - 1) as usize;
                    p[r * w + c] as f64
                };
                let mut out = Vec::with_capacity(h * w);
                for r in 0..h as isize {
                    for c in 0..w as isize {
                        let mut acc = 0.0;
                        for (i, ki) in k.iter().enumerate() {
                            for (j, kj) in k.iter().enumerate() {
                                acc += ki * kj * at(r + i as isize - 1, c + j as isize - 1);
                            }
                        }
                        out.push(acc as f32);
                    }
                }
                Ok(out)
            })
        }
        TransformStep::Cutout { size, row, col } => {
            let sh = ((size * h as f64).floor() as usize).max(1);
            let sw = ((size * w as f64).floor() as usize).max(1);
            let (r0, c0) = (offset(row, h - sh), offset(col, w - sw));
            map_planes(chip, |b, p| {
                let fill = chip.plane_mean(b) as f32;
                let mut out = p.to_vec();
                for r in r0..r0 + sh {
                    out[r * w + c0..r * w + c0 + sw].fill(fill);
                }
                Ok(out)
            })
        }
    }
}

/// Standard-normal draws used by `gaussian_noise`, in data order.
pub fn noise_field(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
