//! Seeded fixtures shared by the benchmarks.

use befd_core::edge::edge_attention;
use befd_core::{AttentionMap, AttentionParams, Field, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_f64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn attention_maps(n: usize, h: usize, w: usize, seed: u64) -> Vec<AttentionMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| edge_attention(&Field::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)), &AttentionParams::default()))
        .collect()
}

/// `n` scores in [0, 1) with labels drawn at rate `p`.
pub fn scored(n: usize, p: f64, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random_range(0.0..1.0), rng.random_bool(p))).collect()
}
