use std::path::Path;

use super::{load_chip, Band, DatasetManifest, MultispectralChip, RasterError};

/// Floor applied to every per-band standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-band mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub bands: Vec<Band>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn new(bands: Vec<Band>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self, RasterError> {
        if bands.len() != mean.len() || bands.len() != std.len() {
            return Err(RasterError::InconsistentBands("statistics vectors differ in length".into()));
        }
        let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(Self { bands, mean, std })
    }

    /// Zero mean, unit deviation for every band.
    pub fn identity(bands: &[Band]) -> Self {
        Self { bands: bands.to_vec(), mean: vec![0.0; bands.len()], std: vec![1.0; bands.len()] }
    }

    pub fn get(&self, band: Band) -> Option<(f64, f64)> {
        self.bands.iter().position(|&b| b == band).map(|i| (self.mean[i], self.std[i]))
    }

    /// Tab-separated `band  mean  std` lines. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((b, m), s) in self.bands.iter().zip(&self.mean).zip(&self.std) {
            out.push_str(&format!("{}\t{m:?}\t{s:?}\n", b.code()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RasterError> {
        let (mut bands, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let err = |msg: String| RasterError::ManifestParse { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected band, mean and std, got {} fields", fields.len())));
            }
            let number = |f: &str| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad number `{f}`")))
            };
            bands.push(fields[0].parse()?);
            mean.push(number(fields[1])?);
            std.push(number(fields[2])?);
        }
        if bands.is_empty() {
            return Err(RasterError::EmptyManifest);
        }
        Self::new(bands, mean, std)
    }

    /// `(mean, std)` for each band of `chip`, in chip order.
    pub fn for_chip(&self, chip: &MultispectralChip) -> Result<Vec<(f64, f64)>, RasterError> {
        chip.bands().iter().map(|&b| self.get(b).ok_or(RasterError::MissingBandStats(b))).collect()
    }
}

/// Running moments merged with Chan's pairwise update.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f32]) -> Self {
        let count = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / count;
        let m2 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        Self { count, mean, m2 }
    }

    fn merge(self, other: Moments) -> Moments {
        if self.count == 0.0 {
            return other;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Moments {
            count,
            mean: self.mean + delta * other.count / count,
            m2: self.m2 + other.m2 + delta * delta * self.count * other.count / count,
        }
    }
}

/// Per-band statistics over every pixel of every chip. Each chip is reduced
/// exactly (two passes) and the partial moments are merged in input order,
/// so the result does not depend on how chips are batched.
pub fn band_stats_of_chips<'a>(
    chips: impl IntoIterator<Item = &'a MultispectralChip>,
) -> Result<BandStats, RasterError> {
    let mut bands: Option<Vec<Band>> = None;
    let mut acc: Vec<Moments> = Vec::new();
    for chip in chips {
        match &bands {
            None => {
                bands = Some(chip.bands().to_vec());
                acc = vec![Moments::default(); chip.bands().len()];
            }
            Some(b) if b.as_slice() != chip.bands() => {
                return Err(RasterError::InconsistentBands(format!("{:?} vs {:?}", b, chip.bands())));
            }
            Some(_) => {}
        }
        for (i, slot) in acc.iter_mut().enumerate() {
            *slot = slot.merge(Moments::of(chip.plane(i)));
        }
    }
    let bands = bands.ok_or(RasterError::EmptyManifest)?;
    let mean = acc.iter().map(|m| m.mean).collect();
    let std = acc.iter().map(|m| (m.m2 / m.count).sqrt()).collect();
    BandStats::new(bands, mean, std)
}

/// Band statistics over every chip listed in a manifest.
pub fn compute_band_stats(manifest: &DatasetManifest, root: &Path) -> Result<BandStats, RasterError> {
    if manifest.entries.is_empty() {
        return Err(RasterError::EmptyManifest);
    }
    let chips = manifest.entries.iter().map(|e| load_chip(&root.join(&e.path))).collect::<Result<Vec<_>, _>>()?;
    band_stats_of_chips(&chips)
}

/// A chip after per-band standardization, held at `f64` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedChip {
    pub height: usize,
    pub width: usize,
    pub bands: Vec<Band>,
    pub data: Vec<f64>,
}

/// `(x − mean_b) / std_b` for every value of band `b`.
pub fn normalize_chip(chip: &MultispectralChip, stats: &BandStats) -> Result<NormalizedChip, RasterError> {
    let per_band = stats.for_chip(chip)?;
    let n = chip.plane_len();
    let data = chip
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (m, s) = per_band[i / n];
            (v as f64 - m) / s
        })
        .collect();
    Ok(NormalizedChip { height: chip.height(), width: chip.width(), bands: chip.bands().to_vec(), data })
}

/// Inverse of [`normalize_chip`], rounding back to stored precision.
pub fn denormalize_chip(chip: &NormalizedChip, stats: &BandStats) -> Result<MultispectralChip, RasterError> {
    let n = chip.height * chip.width;
    let per_band = chip
        .bands
        .iter()
        .map(|&b| stats.get(b).ok_or(RasterError::MissingBandStats(b)))
        .collect::<Result<Vec<_>, _>>()?;
    let data = chip
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (m, s) = per_band[i / n];
            (v * s + m) as f32
        })
        .collect();
    MultispectralChip::new(chip.height, chip.width, chip.bands.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn text_round_trip() {
        let stats = BandStats::new(vec![Band::B02, Band::B12], vec![0.1, 1.0 / 3.0], vec![2e-3, 0.25]).unwrap();
        assert_eq!(BandStats::parse(&stats.to_text()).unwrap(), stats);
        assert!(BandStats::parse("B02\t0.1\n").is_err());
        assert!(BandStats::parse("B99\t0.1\t1\n").is_err());
        assert!(BandStats::parse("").is_err());
    }

    fn chip(bands: Vec<Band>, h: usize, w: usize, data: Vec<f32>) -> MultispectralChip {
        MultispectralChip::new(h, w, bands, data).unwrap()
    }

    #[test]
    fn constant_chip_has_floored_std() {
        let c = chip(vec![Band::B04], 2, 2, vec![0.4; 4]);
        let stats = band_stats_of_chips([&c]).unwrap();
        assert!((stats.mean[0] - 0.4).abs() < 1e-7);
        assert_eq!(stats.std[0], STD_FLOOR);
    }

    #[test]
    fn two_pixels() {
        let a = chip(vec![Band::B08], 1, 1, vec![0.0]);
        let b = chip(vec![Band::B08], 1, 1, vec![2.0]);
        let stats = band_stats_of_chips([&a, &b]).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    /// Naive two-pass oracle over the flattened pixels of a random manifest.
    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bands = vec![Band::B02, Band::B08, Band::B11];
        let chips: Vec<_> = (0..50)
            .map(|_| {
                let data = (0..3 * 6 * 5).map(|_| rng.gen_range(0.0f32..1.5)).collect();
                chip(bands.clone(), 6, 5, data)
            })
            .collect();
        let stats = band_stats_of_chips(&chips).unwrap();
        for b in 0..3 {
            let all: Vec<f64> = chips.iter().flat_map(|c| c.plane(b).iter().map(|&v| v as f64)).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
            assert!(((stats.mean[b] - mean) / mean).abs() < 1e-9);
            assert!(((stats.std[b] - var.sqrt()) / var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let a = chip(vec![Band::B08], 1, 1, vec![0.0]);
        let b = chip(vec![Band::B04], 1, 1, vec![0.0]);
        assert!(matches!(band_stats_of_chips([&a, &b]), Err(RasterError::InconsistentBands(_))));
        assert!(matches!(band_stats_of_chips(std::iter::empty()), Err(RasterError::EmptyManifest)));
        let stats = BandStats::identity(&[Band::B02]);
        assert!(matches!(normalize_chip(&a, &stats), Err(RasterError::MissingBandStats(Band::B08))));
    }

    #[test]
    fn normalize_examples() {
        let c = chip(vec![Band::B02, Band::B03], 1, 2, vec![0.7, 0.7, 0.3, 0.5]);
        let stats = BandStats::new(vec![Band::B03, Band::B02], vec![0.3, 0.3], vec![0.2, 0.2]).unwrap();
        let n = normalize_chip(&c, &stats).unwrap();
        assert!((n.data[0] - 2.0).abs() < 1e-6);
        assert!(n.data[2].abs() < 1e-7);
        assert!((n.data[3] - 1.0).abs() < 1e-6);
        let same = normalize_chip(&c, &BandStats::identity(&[Band::B02, Band::B03])).unwrap();
        assert_eq!(denormalize_chip(&same, &BandStats::identity(&[Band::B02, Band::B03])).unwrap(), c);
        assert!(same.data.iter().zip(c.data()).all(|(a, &b)| *a == b as f64));
    }

    proptest! {
        #[test]
        fn normalize_then_denormalize_recovers(values in proptest::collection::vec(0.01f32..1.5, 8),
                                               mean in 0.0f64..0.8, std in 0.05f64..0.5) {
            let c = chip(vec![Band::B05, Band::B12], 2, 2, values);
            let stats = BandStats::new(vec![Band::B05, Band::B12], vec![mean, mean * 0.5], vec![std, std * 2.0]).unwrap();
            let back = denormalize_chip(&normalize_chip(&c, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.data().iter().zip(c.data()) {
                prop_assert!(((a - b) / b).abs() < 1e-6);
            }
        }
    }
}
