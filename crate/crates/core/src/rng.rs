//! Seeded random streams.
//!
//! Every random quantity in the lab is drawn from a stream keyed by
//! `(seed, index, purpose)`, so any sample can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags; each selects an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Scatterers = 2,
    PathPhases = 3,
    Render = 4,
    Noise = 5,
    Split = 6,
    Init = 7,
    Shuffle = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, index: u64, stream: Stream) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ index) ^ stream as u64);
    ChaCha8Rng::seed_from_u64(key)
}
