//! Deterministic synthetic stand-in for Sentinel-2 chips.
//!
//! Every chip is a smooth, illumination-scaled background spectrum with
//! tinted "dry field" rectangles. Irrigated chips additionally carry
//! crop-row textured fields with elevated B08/B11/B12 reflectance and a
//! small chip-wide offset in those bands. Both scale with
//! `SIGNAL_SCALE · class_signal³`, so values near 1 are easy while mid-range
//! values leave the class hidden behind the per-chip illumination spread.
//! 20 m bands are rendered on a half-resolution grid and upsampled, as real
//! ingestion would do.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    resample_band, save_chip, Band, DatasetManifest, Label, ManifestEntry, MultispectralChip, Plane, RasterError,
};
use crate::rng::stream;

/// Typical vegetated-soil reflectance per band, in registry order.
const BASE_SPECTRUM: [f64; 10] = [0.05, 0.08, 0.07, 0.12, 0.20, 0.24, 0.28, 0.30, 0.22, 0.14];
/// Per-band gain of the irrigated-field signal (B08, B11, B12 only).
const FIELD_GAIN: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.22, 0.0, 0.12, 0.08];
const OFFSET_GAIN: f64 = 0.25;
const PIXEL_NOISE: f64 = 0.01;
const MAX_REFLECTANCE: f64 = 1.5;
const SIGNAL_SCALE: f64 = 3.0;
/// Per-chip multiplicative illumination range.
const ILLUMINATION: (f64, f64) = (0.6, 1.4);

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub chip_size: usize,
    pub class_signal: f64,
    /// Region tags assigned round-robin to labeled chips; empty for none.
    pub regions: Vec<String>,
}

impl SynthParams {
    pub fn new(seed: u64, n_unlabeled: usize, n_labeled: usize, chip_size: usize, class_signal: f64) -> Self {
        Self { seed, n_unlabeled, n_labeled, chip_size, class_signal, regions: Vec::new() }
    }

    fn validate(&self) -> Result<(), RasterError> {
        if self.n_unlabeled == 0 || self.n_labeled == 0 {
            return Err(RasterError::InvalidSynthParams("counts must be positive".into()));
        }
        if self.n_labeled % 2 != 0 {
            return Err(RasterError::OddLabeledCount(self.n_labeled));
        }
        if self.chip_size < 2 || self.chip_size > u16::MAX as usize {
            return Err(RasterError::InvalidSynthParams(format!("chip size {}", self.chip_size)));
        }
        if !(self.class_signal > 0.0 && self.class_signal <= 1.0) {
            return Err(RasterError::InvalidSynthParams(format!("class_signal {} outside (0, 1]", self.class_signal)));
        }
        Ok(())
    }
}

/// One generated chip with its true class (hidden for pool chips).
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub entry: ManifestEntry,
    pub chip: MultispectralChip,
    pub truth: Label,
}

#[derive(Clone, Copy)]
struct Rect {
    u0: f64,
    u1: f64,
    v0: f64,
    v1: f64,
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let w = rng.gen_range(lo..hi);
        let h = rng.gen_range(lo..hi);
        let u0 = rng.gen_range(0.0..1.0 - w);
        let v0 = rng.gen_range(0.0..1.0 - h);
        Self { u0, u1: u0 + w, v0, v1: v0 + h }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }
}

struct Scene {
    illumination: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    dry_fields: Vec<(Rect, [f64; 10])>,
    wet_fields: Vec<(Rect, f64, f64)>,
    class_signal: f64,
    irrigated: bool,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, irrigated: bool, class_signal: f64) -> Self {
        let illumination = rng.gen_range(ILLUMINATION.0..ILLUMINATION.1);
        let waves = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.08),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let dry_fields = (0..rng.gen_range(1..=2))
            .map(|_| {
                let rect = Rect::random(rng, 0.2, 0.6);
                let mut tint = [0.0; 10];
                for t in &mut tint {
                    *t = rng.gen_range(0.85..1.15);
                }
                (rect, tint)
            })
            .collect();
        let wet_fields = if irrigated {
            (0..rng.gen_range(1..=3))
                .map(|_| (Rect::random(rng, 0.45, 0.8), rng.gen_range(0.0..PI), rng.gen_range(6.0..10.0)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            illumination,
            waves,
            dry_fields,
            wet_fields,
            class_signal: SIGNAL_SCALE * class_signal.powi(3),
            irrigated,
        }
    }

    fn reflectance(&self, band: usize, u: f64, v: f64) -> f64 {
        let texture: f64 =
            self.waves.iter().map(|&(amp, fu, fv, phase)| amp * (2.0 * PI * (fu * u + fv * v) + phase).sin()).sum();
        let mut value = BASE_SPECTRUM[band] * (1.0 + texture);
        for (rect, tint) in &self.dry_fields {
            if rect.contains(u, v) {
                value *= tint[band];
            }
        }
        if self.irrigated && FIELD_GAIN[band] > 0.0 {
            value += self.class_signal * FIELD_GAIN[band] * OFFSET_GAIN;
            if let Some(&(_, angle, freq)) = self.wet_fields.iter().find(|(r, _, _)| r.contains(u, v)) {
                let along = u * angle.cos() + v * angle.sin();
                let rows = 1.0 + 0.15 * (2.0 * PI * freq * along).sin();
                value += self.class_signal * FIELD_GAIN[band] * rows;
            }
        }
        value * self.illumination
    }
}

/// Renders one chip from its own seeded stream.
pub fn synthesize_chip(
    seed: u64,
    kind: &str,
    index: u64,
    irrigated: bool,
    size: usize,
    class_signal: f64,
) -> MultispectralChip {
    let mut rng = stream(seed, &format!("synth/chip/{kind}"), &[index]);
    let scene = Scene::sample(&mut rng, irrigated, class_signal);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut data = Vec::with_capacity(size * size * Band::ALL.len());
    for (b, band) in Band::ALL.iter().enumerate() {
        let grid = if band.native_resolution() == 10 { size } else { size.div_ceil(2) };
        let mut plane = Vec::with_capacity(grid * grid);
        for y in 0..grid {
            for x in 0..grid {
                let (u, v) = ((x as f64 + 0.5) / grid as f64, (y as f64 + 0.5) / grid as f64);
                let value = scene.reflectance(b, u, v) + noise.sample(&mut rng);
                plane.push(value.clamp(0.0, MAX_REFLECTANCE) as f32);
            }
        }
        let plane = Plane::new(grid, grid, plane).expect("grid is non-empty");
        let plane = resample_band(&plane, size, size).expect("size is non-zero");
        data.extend(plane.data);
    }
    MultispectralChip::new(size, size, Band::ALL.to_vec(), data).expect("generated values are finite")
}

/// Generates every chip in memory. Pool chips draw their hidden class from
/// a fair coin; labeled chips are exactly balanced in a seeded order.
pub fn synthesize(params: &SynthParams) -> Result<Vec<SynthSample>, RasterError> {
    params.validate()?;
    let mut samples = Vec::with_capacity(params.n_unlabeled + params.n_labeled);
    let mut coin = stream(params.seed, "synth/pool-classes", &[]);
    for i in 0..params.n_unlabeled {
        let irrigated = coin.gen_bool(0.5);
        let chip =
            synthesize_chip(params.seed, "unlabeled", i as u64, irrigated, params.chip_size, params.class_signal);
        samples.push(SynthSample {
            entry: ManifestEntry::unlabeled(format!("chips/unlabeled_{i:05}.msc")),
            chip,
            truth: if irrigated { Label::Irrigated } else { Label::NotIrrigated },
        });
    }
    let mut labels: Vec<Label> = (0..params.n_labeled)
        .map(|i| if i < params.n_labeled / 2 { Label::Irrigated } else { Label::NotIrrigated })
        .collect();
    let mut order = stream(params.seed, "synth/label-order", &[]);
    for i in (1..labels.len()).rev() {
        labels.swap(i, order.gen_range(0..=i));
    }
    for (i, &label) in labels.iter().enumerate() {
        let chip = synthesize_chip(
            params.seed,
            "labeled",
            i as u64,
            label.is_irrigated(),
            params.chip_size,
            params.class_signal,
        );
        let mut entry = ManifestEntry::labeled(format!("chips/labeled_{i:05}.msc"), label);
        if !params.regions.is_empty() {
            entry.region = Some(params.regions[i % params.regions.len()].clone());
        }
        samples.push(SynthSample { entry, chip, truth: label });
    }
    Ok(samples)
}

/// Writes chips under `out_dir/chips/` and the manifest to
/// `out_dir/manifest.tsv`.
pub fn generate_synthetic_dataset(out_dir: &Path, params: &SynthParams) -> Result<DatasetManifest, RasterError> {
    let samples = synthesize(params)?;
    for s in &samples {
        save_chip(&out_dir.join(&s.entry.path), &s.chip)?;
    }
    let manifest = DatasetManifest::new(samples.into_iter().map(|s| s.entry).collect())?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
