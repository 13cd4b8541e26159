use super::RasterError;

/// A single 2-D plane of values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroDimension);
        }
        if data.len() != height * width {
            return Err(RasterError::InvalidChip(format!("{} values for a {height}×{width} plane", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Source coordinate of target index `i` under corner alignment.
fn corner_aligned(i: usize, target: usize, source: usize) -> f64 {
    if target == 1 {
        0.0
    } else {
        i as f64 * (source - 1) as f64 / (target - 1) as f64
    }
}

/// Bilinear resampling in which the four corner pixels of the source map
/// exactly onto the four corner pixels of the target.
pub fn resample_band(plane: &Plane, target_height: usize, target_width: usize) -> Result<Plane, RasterError> {
    if target_height == 0 || target_width == 0 || plane.height == 0 || plane.width == 0 {
        return Err(RasterError::ZeroDimension);
    }
    if (target_height, target_width) == (plane.height, plane.width) {
        return Ok(plane.clone());
    }
    let cols: Vec<(usize, usize, f64)> = (0..target_width)
        .map(|x| {
            let sx = corner_aligned(x, target_width, plane.width);
            let x0 = (sx.floor() as usize).min(plane.width - 1);
            let x1 = (x0 + 1).min(plane.width - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(target_height * target_width);
    for y in 0..target_height {
        let sy = corner_aligned(y, target_height, plane.height);
        let y0 = (sy.floor() as usize).min(plane.height - 1);
        let y1 = (y0 + 1).min(plane.height - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &cols {
            let top = plane.get(y0, x0) as f64 * (1.0 - fx) + plane.get(y0, x1) as f64 * fx;
            let bottom = plane.get(y1, x0) as f64 * (1.0 - fx) + plane.get(y1, x1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(Plane { height: target_height, width: target_width, data })
}
