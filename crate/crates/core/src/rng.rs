//! Seedable, counter-addressed random streams.
//!
//! Every consumer derives its generator from `(seed, stream, index)` so that
//! results do not depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const DISTILL: u64 = 4;
    pub const ONPOLICY: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const BENCH: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for item `index` of stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> DetRng {
    let key = splitmix(splitmix(seed) ^ splitmix(stream.wrapping_mul(0xA24B_AED4_963E_E407)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
