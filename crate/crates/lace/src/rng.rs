//! Seeded randomness helpers. Everything stochastic in the library draws from
//! ChaCha streams derived here so runs are reproducible bit-for-bit and
//! independent of scheduling order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Base generator for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Finalizer from splitmix64; bijective on u64, used to decorrelate nearby
/// seeds and stream ids.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for a (seed, a, b) triple, e.g. (run seed, step, item).
/// `a` and `b` must fit in 32 bits so the pair packs injectively; the derived
/// stream then depends only on the triple, never on execution order.
pub fn derive_stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    debug_assert!(a < (1 << 32) && b < (1 << 32), "stream ids must fit in 32 bits");
    let packed = (a << 32) | (b & 0xFFFF_FFFF);
    ChaCha8Rng::seed_from_u64(mix(seed) ^ mix(packed))
}

/// Matrix of i.i.d. standard normal draws, row-major order.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}
