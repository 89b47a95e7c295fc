//! Seed derivation and init helpers.
//!
//! Every random draw in the crate flows through a ChaCha stream seeded by a
//! pure function of (master seed, purpose tags), so any step of any run can
//! be reproduced from the config seed alone — no RNG state is carried across
//! steps or into checkpoints.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Scalar;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with purpose tags into a stream seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> F {
    loop {
        // Box-Muller; resample outside +-2 sigma.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return F::cast(z * std);
        }
    }
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Sample `k` distinct values from 0..n (partial Fisher-Yates), sorted.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}
