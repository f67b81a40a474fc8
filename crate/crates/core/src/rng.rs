//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator addressed by
//! `(seed, label, index)`. The label selects a key derived from the top-level
//! seed, the index selects the ChaCha stream under that key. ChaCha is a
//! counter-based cipher, so two streams never overlap and the draws of one
//! replication do not depend on how many other replications ran before it or
//! on which worker thread picked it up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Generator for the named substream `label`, stream `index`, under `seed`.
pub fn substream(seed: u64, label: &str, index: u64) -> StreamRng {
    let key = seed.rotate_left(17) ^ fnv1a(label.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Derive a child seed, for handing a whole sub-computation its own seed space.
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, label, index).next_u64()
}
