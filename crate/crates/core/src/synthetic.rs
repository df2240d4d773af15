//! Deterministic synthetic images for tests, examples and smoke runs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;

/// A smooth RGB image: per channel, a base level plus a few random
/// low-frequency sinusoids, clamped to `[0, 1]`.
pub fn smooth_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<Vec<(f64, f64, f64, f64)>> = (0..3)
        .map(|_| {
            (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.05..0.2),
                        rng.random_range(0.3..3.0),
                        rng.random_range(0.3..3.0),
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect()
        })
        .collect();
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.7)).collect();
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        let v = y as f64 / height as f64;
        for x in 0..width {
            let u = x as f64 / width as f64;
            for c in 0..3 {
                let s: f64 = waves[c]
                    .iter()
                    .map(|&(a, fx, fy, p)| a * (TAU * (fx * u + fy * v) + p).sin())
                    .sum();
                data.push(base[c] + s);
            }
        }
    }
    ImageTensor::from_clamped(height, width, data).expect("valid size")
}

/// Uniform i.i.d. pixels.
pub fn noise_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * 3).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(height, width, data).expect("valid size")
}
