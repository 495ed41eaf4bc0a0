//! Seeded weight initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::real::Real;

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> InitRng {
    let mut r = rng(seed);
    r.set_stream(stream);
    r
}

pub fn zeros<T: Real>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

pub fn ones<T: Real>(n: usize) -> Vec<T> {
    vec![T::one(); n]
}

/// Normal draws with `|x| ≤ 2·std`, redrawing outside the bound.
pub fn trunc_normal<T: Real>(rng: &mut InitRng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).unwrap();
    (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::from_f64(x);
            }
        })
        .collect()
}

/// Kaiming normal in fan-in mode with ReLU gain: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Real>(rng: &mut InitRng, n: usize, fan_in: usize) -> Vec<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// `U(−1/√fan_in, 1/√fan_in)`, the default for dense layers.
pub fn fan_in_uniform<T: Real>(rng: &mut InitRng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    (0..n).map(|_| T::from_f64(rng.sample(dist))).collect()
}
