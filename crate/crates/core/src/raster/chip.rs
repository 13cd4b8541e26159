use std::fs;
use std::path::Path;

use super::{Band, RasterError};

pub const CHIP_MAGIC: &[u8; 4] = b"MSC1";
pub const CHIP_FORMAT_VERSION: u8 = 1;
const FIXED_HEADER_LEN: usize = 4 + 1 + 1 + 2 + 2;

/// An H×W raster with one plane per band, stored `[band][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralChip {
    height: usize,
    width: usize,
    bands: Vec<Band>,
    data: Vec<f32>,
}

impl MultispectralChip {
    pub fn new(height: usize, width: usize, bands: Vec<Band>, data: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroDimension);
        }
        if bands.is_empty() {
            return Err(RasterError::InvalidChip("chip has no bands".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(RasterError::InvalidChip(format!("band {b} listed twice")));
            }
        }
        if data.len() != height * width * bands.len() {
            return Err(RasterError::InvalidChip(format!(
                "{} values for {height}×{width}×{}",
                data.len(),
                bands.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::NonFiniteValue);
        }
        Ok(Self { height, width, bands, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// The plane at position `index` in the band list.
    pub fn plane(&self, index: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn band_index(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    /// Mean of one plane, accumulated in `f64`.
    pub fn plane_mean(&self, index: usize) -> f64 {
        self.plane(index).iter().map(|&v| v as f64).sum::<f64>() / self.plane_len() as f64
    }

    /// Builds a chip of the same geometry and bands from new values.
    /// Non-finite values are rejected.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, RasterError> {
        Self::new(self.height, self.width, self.bands.clone(), data)
    }

    /// A single-band chip holding plane `index`.
    pub fn extract_band(&self, index: usize) -> MultispectralChip {
        MultispectralChip {
            height: self.height,
            width: self.width,
            bands: vec![self.bands[index]],
            data: self.plane(index).to_vec(),
        }
    }
}

/// Serializes a chip into the MSC1 layout.
pub fn write_chip(chip: &MultispectralChip) -> Result<Vec<u8>, RasterError> {
    if chip.height > u16::MAX as usize || chip.width > u16::MAX as usize || chip.bands.len() > u8::MAX as usize {
        return Err(RasterError::InvalidChip("dimensions exceed the MSC1 header".into()));
    }
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + 4 * chip.bands.len() + 4 * chip.data.len());
    out.extend_from_slice(CHIP_MAGIC);
    out.push(CHIP_FORMAT_VERSION);
    out.push(chip.bands.len() as u8);
    out.extend_from_slice(&(chip.height as u16).to_le_bytes());
    out.extend_from_slice(&(chip.width as u16).to_le_bytes());
    for band in &chip.bands {
        out.extend_from_slice(&band.file_code());
    }
    for v in &chip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an MSC1 chip. Trailing bytes after the payload are rejected so
/// that a successful read always re-serializes to the same bytes.
pub fn read_chip(bytes: &[u8]) -> Result<MultispectralChip, RasterError> {
    if bytes.len() < 4 || &bytes[..4] != CHIP_MAGIC {
        return Err(RasterError::BadMagic);
    }
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(RasterError::TruncatedPayload { expected: FIXED_HEADER_LEN, actual: bytes.len() });
    }
    if bytes[4] != CHIP_FORMAT_VERSION {
        return Err(RasterError::UnsupportedVersion(bytes[4]));
    }
    let band_count = bytes[5] as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = FIXED_HEADER_LEN + 4 * band_count;
    let expected = payload_start + 4 * band_count * height * width;
    if bytes.len() < expected {
        return Err(RasterError::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(RasterError::TrailingBytes(bytes.len() - expected));
    }
    let bands = bytes[FIXED_HEADER_LEN..payload_start]
        .chunks_exact(4)
        .map(|c| Band::from_file_code([c[0], c[1], c[2], c[3]]))
        .collect::<Result<Vec<_>, _>>()?;
    let data = bytes[payload_start..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    MultispectralChip::new(height, width, bands, data)
}

pub fn load_chip(path: &Path) -> Result<MultispectralChip, RasterError> {
    let bytes = fs::read(path).map_err(|e| RasterError::io(path, e))?;
    read_chip(&bytes)
}

pub fn save_chip(path: &Path, chip: &MultispectralChip) -> Result<(), RasterError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RasterError::io(parent, e))?;
    }
    fs::write(path, write_chip(chip)?).map_err(|e| RasterError::io(path, e))
}
