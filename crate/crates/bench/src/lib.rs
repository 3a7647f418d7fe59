//! Shared fixtures for the criterion benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_array(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Image with values in `[0, 1]`.
pub fn random_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
    random_array((3, h, w), seed).mapv(|v| 0.5 + 0.5 * v)
}
