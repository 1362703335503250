//! Stateless RNG derivation.
//!
//! Every random decision in a run is drawn from a generator derived from
//! (run seed, purpose label, two indices). Streams are independent of
//! execution order, so resuming, reordering work, or evaluating mid-run
//! cannot perturb later draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for `(seed, purpose, a, b)`.
///
/// `purpose` is a short label such as `"init"`, `"noise"`, `"timestep"`,
/// `"data"`. `a`/`b` are context indices (typically epoch and step, or a
/// sample index and 0).
pub fn rng_for(seed: u64, purpose: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = mix(seed ^ 0x74d5_e591_c3a1_0b27);
    for &byte in purpose.as_bytes() {
        h = mix(h ^ u64::from(byte));
    }
    h = mix(h ^ a);
    h = mix(h ^ b);
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
