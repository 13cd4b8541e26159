use std::fmt;
use std::str::FromStr;

use super::RasterError;

/// One of the ten Sentinel-2 surface-reflectance bands at 10 m or 20 m.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    B02,
    B03,
    B04,
    B05,
    B06,
    B07,
    B08,
    B8A,
    B11,
    B12,
}

impl Band {
    /// The full registry, in canonical storage order.
    pub const ALL: [Band; 10] =
        [Band::B02, Band::B03, Band::B04, Band::B05, Band::B06, Band::B07, Band::B08, Band::B8A, Band::B11, Band::B12];

    pub fn code(self) -> &'static str {
        match self {
            Band::B02 => "B02",
            Band::B03 => "B03",
            Band::B04 => "B04",
            Band::B05 => "B05",
            Band::B06 => "B06",
            Band::B07 => "B07",
            Band::B08 => "B08",
            Band::B8A => "B8A",
            Band::B11 => "B11",
            Band::B12 => "B12",
        }
    }

    /// Native ground sampling distance in meters.
    pub fn native_resolution(self) -> u32 {
        match self {
            Band::B02 | Band::B03 | Band::B04 | Band::B08 => 10,
            _ => 20,
        }
    }

    /// Four-byte space-padded code as stored in chip files.
    pub(crate) fn file_code(self) -> [u8; 4] {
        let mut out = [b' '; 4];
        out[..3].copy_from_slice(self.code().as_bytes());
        out
    }

    pub(crate) fn from_file_code(raw: [u8; 4]) -> Result<Band, RasterError> {
        let text =
            std::str::from_utf8(&raw).map_err(|_| RasterError::UnknownBand(format!("{raw:?}")))?.trim_end_matches(' ');
        text.parse()
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Band {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Band::ALL.into_iter().find(|b| b.code() == s).ok_or_else(|| RasterError::UnknownBand(s.to_string()))
    }
}
