//! Deterministic RNG streams derived from a master seed.
//!
//! Every random draw in the engine comes from a stream addressed by
//! `(master seed, purpose tag, indices)`. Streams are recomputed from their
//! address on demand, so checkpoints only need to store loop counters, never
//! generator state, and resumed runs replay the exact bit stream of an
//! uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `tag` at a point in the index hierarchy (for example
/// `("fixation", [scene, fixation])`). Disjoint addresses give
/// statistically independent streams.
pub fn stream(master: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut state = master;
    // Absorb a header so (tag, indices) pairs with shared prefixes cannot
    // collide across different lengths.
    splitmix64(&mut state);
    state ^= tag.len() as u64 ^ ((indices.len() as u64) << 32);
    for chunk in tag.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(word);
        splitmix64(&mut state);
    }
    for &ix in indices {
        state ^= ix;
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for word in key.chunks_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
