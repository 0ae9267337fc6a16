//! Shared fixtures for the benchmarks.

use protorec_core::ann::PrototypeId;
use protorec_core::vector::Descriptor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

pub fn items(n: usize, dim: usize, seed: u64) -> Vec<(PrototypeId, Descriptor)> {
    rows(n, dim, seed)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i as PrototypeId, Descriptor::euclidean(v).expect("finite")))
        .collect()
}
