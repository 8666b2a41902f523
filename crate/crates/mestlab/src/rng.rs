//! Reproducible substream RNG.
//!
//! Every random draw in the library is keyed by a master seed plus a path of
//! stream indices (replication, coordinate block, ...). The key is mixed by
//! splitmix64 into a 256-bit ChaCha seed, so identical (seed, path) pairs
//! give identical streams regardless of thread count or evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for the substream identified by `path` under `master_seed`.
pub fn substream(master_seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = master_seed ^ 0x6d657374_6c61625fu64; // domain tag
    let mut _mix = splitmix64(&mut state);
    for &id in path {
        state ^= id.wrapping_mul(0x2545f4914f6cdd1d);
        _mix = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
