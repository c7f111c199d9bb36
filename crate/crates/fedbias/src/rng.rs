//! Seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by
//! (base seed, stream id, two context words). Streams are disjoint, so
//! e.g. removing a party from a run never perturbs another party's
//! shuffles.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Model parameter initialization.
pub const STREAM_INIT: u64 = 1;
/// Minibatch shuffling; context = (party id, round/epoch).
pub const STREAM_SHUFFLE: u64 = 2;
/// Synthetic ground-truth function.
pub const STREAM_TRUTH: u64 = 3;
/// Synthetic per-party sampling; context = (party id, 0).
pub const STREAM_PARTY: u64 = 4;
/// Row partitioning across parties.
pub const STREAM_PARTITION: u64 = 5;
/// Train/test splitting.
pub const STREAM_SPLIT: u64 = 6;

/// Party-id slot used for centralized training, which has no party.
pub const CENTRAL_ID: u64 = u64::MAX;

pub fn seeded_rng(base: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&base.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&a.to_le_bytes());
    seed[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
