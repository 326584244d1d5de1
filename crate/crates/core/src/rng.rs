//! Seeded, splittable random streams.
//!
//! Every consumer draws from its own ChaCha stream identified by
//! `(seed, domain, index)`, so results do not depend on the order in which
//! independent consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Independent purposes that draw random numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Init = 1,
    Synth = 2,
    Shuffle = 3,
    Augment = 4,
    Test = 5,
    GradCheck = 6,
}

/// Stream `index` of `domain` under `seed`. `index` must fit in 56 bits.
pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    debug_assert!(index < 1 << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | index);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
