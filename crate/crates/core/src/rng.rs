//! Seeded, splittable random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the
//! configured seed and a fixed stream label, so adding a new consumer never
//! perturbs the numbers seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels used across the crate.
pub mod streams {
    pub const PARAM_INIT: u64 = 1;
    pub const KERNEL_POINTS: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
}

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hands out a fresh stream per call, in a deterministic order.
#[derive(Debug, Clone)]
pub struct SeedSequence {
    seed: u64,
    base: u64,
    next: u64,
}

impl SeedSequence {
    pub fn new(seed: u64, base: u64) -> Self {
        Self {
            seed,
            base,
            next: 0,
        }
    }

    pub fn next_rng(&mut self) -> Rng {
        let label = self.base.wrapping_mul(1 << 32).wrapping_add(self.next);
        self.next += 1;
        stream(self.seed, label)
    }
}
