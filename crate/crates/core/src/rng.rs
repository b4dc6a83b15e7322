//! Counter-based seeding: every random draw in a run comes from a generator
//! keyed by `(seed, stream, index)`, so resuming never needs RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named sub-streams.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const GUMBEL: u64 = 3;
    pub const DATA: u64 = 4;
    pub const PERMUTE: u64 = 5;
    pub const CODEBOOK: u64 = 6;
}

pub fn keyed(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        h = splitmix(h ^ stream.rotate_left(17 * i as u32 + 1) ^ index.rotate_left(29 * i as u32 + 7));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
