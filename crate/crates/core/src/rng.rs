//! Seeded random streams.
//!
//! Every stochastic quantity in the crate is drawn from xoshiro256++ so that
//! runs are reproducible from a single 64-bit seed.

use rand::{Rng, SeedableRng};
use rand_distr::{Open01, StandardNormal};
pub use rand_xoshiro::Xoshiro256PlusPlus as Xoshiro;

use crate::scalar::Scalar;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> Xoshiro {
    Xoshiro::seed_from_u64(seed)
}

pub fn standard_normal<F: Scalar>(rng: &mut Xoshiro) -> F {
    let x: f64 = rng.sample(StandardNormal);
    F::lit(x)
}

/// Unit-scale Laplace draw by inverting the CDF.
pub fn laplace<F: Scalar>(rng: &mut Xoshiro) -> F {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    let x = -u.signum() * (1.0 - 2.0 * u.abs()).ln();
    F::lit(x)
}

/// `k` distinct indices from `0..n`, drawn uniformly without replacement by
/// a partial Fisher–Yates shuffle, returned in ascending order.
///
/// Sorting makes the reduction order independent of the draw order, so a
/// full draw (`k == n`) is exactly `0..n`.
pub fn sample_without_replacement(rng: &mut Xoshiro, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n} without replacement");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}
