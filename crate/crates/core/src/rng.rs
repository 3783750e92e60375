//! Seeded random streams. Every consumer owns its own generator; independent
//! consumers of one run draw from distinct ChaCha streams of the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const CRITIC_DATA: u64 = 3;
    pub const MAP_DATA: u64 = 4;
    pub const FRAMES: u64 = 5;
    pub const GROUND_TRUTH: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
