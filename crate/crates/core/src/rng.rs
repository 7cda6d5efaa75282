//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_CLASS_SPLIT: u64 = 1;
pub const STREAM_EXAMPLE_SPLIT: u64 = 2;
pub const STREAM_MODEL_INIT: u64 = 10;
pub const STREAM_ENCODER_INIT: u64 = 11;
pub const STREAM_SHUFFLE: u64 = 12;
pub const STREAM_COMPOSER: u64 = 13;
pub const STREAM_VALIDATION: u64 = 14;
pub const STREAM_CALIBRATION: u64 = 15;
pub const STREAM_BENCH: u64 = 20;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
