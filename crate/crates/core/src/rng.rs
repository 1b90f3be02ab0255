//! Seeded random number generation.
//!
//! Every stochastic component draws from [`SeededRng`] (ChaCha with 8 rounds).
//! Gaussian variates come from `rand_distr::StandardNormal`, which uses the
//! ziggurat method; with pinned crate versions a seed fixes every draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for a named consumer of a shared seed.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers for the pipeline's random consumers.
pub mod streams {
    pub const SIMULATION: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
}
