//! Deterministic inputs for the kernel benchmarks.

use simclr_s2_core::raster::{synthesize, MultispectralChip, SynthParams};

/// A smooth, non-constant pattern so kernels never see all-zero data.
pub fn pattern(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|i| ((i as f64) * 0.37 + phase).sin() * 0.5).collect()
}

/// `n` unit-norm rows of width `d`.
pub fn unit_rows(n: usize, d: usize) -> Vec<f64> {
    let mut data = pattern(n * d, 1.3);
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    data
}

/// Unlabeled synthetic chips of side `size`.
pub fn chips(n: usize, size: usize) -> Vec<MultispectralChip> {
    synthesize(&SynthParams::new(1, n, 2, size, 0.6))
        .expect("valid parameters")
        .into_iter()
        .filter(|s| s.entry.label.is_none())
        .map(|s| s.chip)
        .collect()
}
