//! Named, seeded random substreams.
//!
//! Every random draw in the crate comes from a [`SimRng`] derived from one
//! master seed plus a stream name and an index, so stages and blocks never
//! share a generator and results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Generator for substream `(name, index)` of `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
