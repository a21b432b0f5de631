//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator (a 64-bit
//! counter-based stream cipher). The 256-bit key is expanded from the user
//! seed with `SeedableRng::seed_from_u64` and the 64-bit stream id is
//! `(purpose << 32) | index`, so sampling, initialisation and shuffling never
//! share state and each can be replayed on its own.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream purposes. The discriminant is the high half of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    /// Few-shot support selection; index = class id.
    Sample = 1,
    /// Head parameter initialisation; index = parameter slot.
    Init = 2,
    /// Minibatch order across epochs.
    Shuffle = 3,
    /// Synthetic feature generation; index = class id.
    Synth = 4,
    /// CoOp context initialisation.
    Context = 5,
    /// Frozen toy text encoder weights.
    Encoder = 6,
    /// Random instances and probe coordinates for gradient checks.
    Gradcheck = 7,
}

pub fn stream(seed: u64, purpose: Purpose, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}

/// Uniform integer in `0..n` by 64-bit multiply-shift.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// In-place Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
