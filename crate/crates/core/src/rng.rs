//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator keyed by `(base seed, stream tag, index)`, so streams are
//! independent of each other and of the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Selection = 3,
    Evaluation = 4,
    Calibration = 5,
    TraceInput = 6,
    TraceNoise = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream as u64) ^ index)
}

pub fn stream_rng(base: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
