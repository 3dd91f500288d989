//! Seeded random streams.
//!
//! Every stochastic step draws from its own ChaCha8 stream whose 256-bit key
//! is derived from `(master_seed, purpose, indices...)` through SplitMix64
//! mixing. Streams depend only on that tuple, never on scheduling, so results
//! are identical across platforms and thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the purpose tag.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a 64-bit substream seed from a master seed, a purpose tag and a
/// path of indices.
pub fn derive_seed(master: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut state = mix64(master ^ GOLDEN);
    state = mix64(state ^ tag_hash(purpose));
    for &i in indices {
        state = mix64(state.wrapping_add(GOLDEN) ^ mix64(i.wrapping_add(1)));
    }
    state
}

/// Build the stream for `(master, purpose, indices)`.
pub fn stream(master: u64, purpose: &str, indices: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut s = derive_seed(master, purpose, indices);
    for chunk in key.chunks_exact_mut(8) {
        s = s.wrapping_add(GOLDEN);
        chunk.copy_from_slice(&mix64(s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
