use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::BinaryMask;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One image-expression-mask triple.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// `3 x size x size`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub tokens: Vec<usize>,
    pub mask: BinaryMask,
}

/// A noisy grey background with one reddish rectangle; the mask covers the
/// rectangle. Layout and tokens are drawn from `seed`.
pub fn synthetic_sample<T: Real>(size: usize, seed: u64) -> Sample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (size / 3).max(1);
    let top = rng.random_range(0..=size - side);
    let left = rng.random_range(0..=size - side);
    let mut bits = vec![false; size * size];
    let mut data = vec![T::zero(); 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
            bits[y * size + x] = inside;
            let base: [f64; 3] = if inside {
                [0.85, 0.25, 0.2]
            } else {
                [0.45, 0.5, 0.45]
            };
            for (c, b) in base.iter().enumerate() {
                let noise: f64 = rng.random_range(-0.05..0.05);
                data[(c * size + y) * size + x] = T::lit(b + noise);
            }
        }
    }
    let tokens = (0..5).map(|_| rng.random_range(0..1000)).collect();
    Sample {
        image: Tensor::new(vec![3, size, size], data).expect("finite synthetic image"),
        tokens,
        mask: BinaryMask::new(size, size, bits).expect("square mask"),
    }
}
