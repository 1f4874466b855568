//! Seeded generator splitting. Every random draw in the toolkit comes from a
//! generator derived here from `(seed, stream, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams so unrelated consumers never share draws.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Transform = 3,
    Noise = 4,
    Synth = 5,
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub fn split(seed: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
