//! Deterministic random-stream derivation.
//!
//! Every consumer of randomness gets a dedicated stream derived from the run
//! seed plus a tag sequence, so independent pieces of work (epoch shuffles,
//! candidate fine-tunes, the coin stream of the random baseline) never share
//! or race on generator state. Streams are ChaCha8, which is stable across
//! platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tag words for the standard streams. Kept in one place so two call sites
/// can never collide by accident.
pub mod tags {
    pub const INIT: u64 = 0x01;
    pub const EPOCH: u64 = 0x02;
    pub const PROBE: u64 = 0x03;
    pub const COIN: u64 = 0x04;
    pub const CANDIDATE: u64 = 0x05;
    pub const CLASS: u64 = 0x06;
    pub const SAMPLE: u64 = 0x07;
    /// Branch word for the layer-pruned candidate of an iteration.
    pub const BRANCH_LAYER: u64 = 0x10;
    /// Branch word for the filter-pruned candidate of an iteration.
    pub const BRANCH_FILTER: u64 = 0x11;
    /// Split word for held-out synthetic data.
    pub const HELDOUT: u64 = 0x20;
}

/// SplitMix64 finalizer; good avalanche for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`, producing a sub-seed that differs for any
/// distinct tag sequence.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &tag in tags {
        state = mix(state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(tag));
    }
    state
}

/// A fresh generator for the stream named by `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
