//! Named sub-seeds derived from one root seed.
//!
//! Every random stream in a run (task generation, weight init, subset draws,
//! minibatch order) is seeded from `derive(root, name, index)` so that each
//! component can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name.as_bytes())).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, name: &str, index: u64) -> Rng {
    rng(derive(root, name, index))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}
