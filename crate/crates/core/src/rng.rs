//! Seeded randomness shared by every stochastic routine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform sample in `[-half_width, half_width]`.
pub fn symmetric<R: rand::Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return 0.0;
    }
    rng.random_range(-half_width..=half_width)
}
