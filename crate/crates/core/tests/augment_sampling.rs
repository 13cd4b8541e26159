//! Frequency and collision checks on sampled augmentation pairs.

use std::collections::BTreeMap;

use simclr_s2_core::augment::{sample_augmentation_pair, AugmentationRng, GEOMETRIC_KINDS, PHOTOMETRIC_KINDS};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn kinds_cover_registry_and_geometric_frequencies_are_uniform() {
    let mut geometric: BTreeMap<&str, u64> = BTreeMap::new();
    let mut photometric: BTreeMap<&str, u64> = BTreeMap::new();
    let n = 10_000u64;
    for i in 0..n / 2 {
        let (a, b) = sample_augmentation_pair(&AugmentationRng::new(2024, "pretrain", 0, i, 0));
        for spec in [a, b] {
            *geometric.entry(spec.steps()[0].kind()).or_default() += 1;
            *photometric.entry(spec.steps()[1].kind()).or_default() += 1;
        }
    }
    for kind in GEOMETRIC_KINDS {
        assert!(geometric.get(kind).copied().unwrap_or(0) > 0, "{kind} never sampled");
    }
    for kind in PHOTOMETRIC_KINDS {
        assert!(photometric.get(kind).copied().unwrap_or(0) > 0, "{kind} never sampled");
    }
    let expected = n as f64 / GEOMETRIC_KINDS.len() as f64;
    let stat: f64 = geometric.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((GEOMETRIC_KINDS.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}, counts {geometric:?}");
}

#[test]
fn the_two_views_of_a_sample_differ() {
    let trials = 1000;
    let collisions = (0..trials)
        .filter(|&i| {
            let (a, b) = sample_augmentation_pair(&AugmentationRng::new(11, "pretrain", 3, i, 0));
            a == b
        })
        .count();
    assert!((collisions as f64) < 0.01 * trials as f64, "{collisions} identical pairs");
}
