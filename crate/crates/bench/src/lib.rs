//! Shared fixtures for the benchmarks.

use planepose_core::volume::{generate_phantom, random_transform, sample_slice, Image, SliceGrid};
use planepose_core::{AugmentConfig, SimTransform, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Phantom edge length used across benchmarks.
pub const SIDE: usize = 96;

pub fn volume() -> Volume {
    generate_phantom(0, [SIDE; 3]).expect("phantom")
}

pub fn transforms(n: usize, seed: u64) -> Vec<SimTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AugmentConfig::default();
    (0..n).map(|_| random_transform(&mut rng, &cfg)).collect()
}

pub fn images(v: &Volume, grid: SliceGrid, n: usize) -> Vec<Image> {
    transforms(n, 1)
        .iter()
        .map(|x| sample_slice(v, x, grid).expect("slice").image)
        .collect()
}
