use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xkt_autograd::{Real, Tensor};

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
        self.uniform(shape, -bound, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], lo: Real, hi: Real) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }
}
