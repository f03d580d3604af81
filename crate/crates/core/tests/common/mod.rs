#![allow(dead_code)]

use fantasy_core::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Isotropic Gaussian mixture with fixed component means.
pub struct Mixture {
    dim: usize,
    means: Vec<Vec<f32>>,
    noise: f32,
}

impl Mixture {
    pub fn new(dim: usize, components: usize, spread: f32, noise: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, spread).unwrap();
        let means = (0..components)
            .map(|_| (0..dim).map(|_| n.sample(&mut rng)).collect())
            .collect();
        Self { dim, means, noise }
    }

    pub fn sample(&self, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = Uniform::new(0, self.means.len()).unwrap();
        let n = Normal::new(0.0f32, self.noise).unwrap();
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            let m = &self.means[pick.sample(&mut rng)];
            data.extend(m.iter().map(|&x| x + n.sample(&mut rng)));
        }
        Dataset::new(self.dim, data).unwrap()
    }
}

/// The 20,000 x 64 corpus and 200 held-out queries used by the recall checks.
pub fn desk_corpus() -> (Dataset, Dataset) {
    let mix = Mixture::new(64, 32, 3.0, 1.0, 7);
    (mix.sample(20_000, 11), mix.sample(200, 13))
}

pub fn small_corpus(n: usize, nq: usize, seed: u64) -> (Dataset, Dataset) {
    let mix = Mixture::new(16, 8, 3.0, 1.0, seed);
    (mix.sample(n, seed + 1), mix.sample(nq, seed + 2))
}
