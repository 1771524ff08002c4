//! Keyed deterministic randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, index)` and selected by a [`Stream`] id, so any attempt or
//! epoch can be regenerated independently of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids. Changing a value changes every dataset generated with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Placement = 1,
    Camera = 2,
    Orientation = 3,
    OracleNoise = 4,
    Split = 5,
    Init = 6,
    Shuffle = 7,
    Dropout = 8,
    Protocol = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, index)` on `stream`.
pub fn keyed(seed: u64, index: u64, stream: Stream) -> ChaCha8Rng {
    let mut state = seed ^ index.rotate_left(32).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    // index also goes in verbatim so distinct indices can never share a key
    key[24..].copy_from_slice(&(splitmix64(&mut state) ^ index).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream as u64);
    rng
}

/// Derives a child seed, e.g. one per protocol cell.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut s = seed ^ a.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let x = splitmix64(&mut s);
    let mut t = x ^ b.wrapping_mul(0x1656_67B1_9E37_79F9);
    splitmix64(&mut t)
}
