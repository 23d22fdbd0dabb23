//! Seeded RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! single experiment seed plus a namespaced stream id. Parallel batch
//! generation stays reproducible because each (task, sequence) pair owns its
//! own stream regardless of scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NS_MATRIX: u64 = 1 << 56;
const NS_SEQUENCE: u64 = 2 << 56;
const NS_INIT: u64 = 3 << 56;
const NS_MISC: u64 = 4 << 56;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream for the `index`-th transition matrix of a task set.
pub fn matrix_rng(seed: u64, index: u64) -> ChaCha8Rng {
    stream(seed, NS_MATRIX | index)
}

/// Stream for one sampled sequence, keyed by (batch, index within batch).
pub fn sequence_rng(seed: u64, batch: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(batch < 1 << 32 && index < 1 << 24);
    stream(seed, NS_SEQUENCE | (batch << 24) | index)
}

/// Stream for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, NS_INIT)
}

/// Stream for auxiliary draws (Monte-Carlo estimators, bootstraps, ...).
pub fn misc_rng(seed: u64, id: u64) -> ChaCha8Rng {
    stream(seed, NS_MISC | id)
}
