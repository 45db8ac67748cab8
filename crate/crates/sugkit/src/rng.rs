//! Seeded, named RNG substreams.
//!
//! Every randomized stage (model init, samplers, dataset shuffles) draws from
//! its own substream derived from the run seed and a stable name, so changing
//! how much randomness one stage consumes never perturbs another.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

/// Derives a deterministic RNG for `(seed, name)`.
///
/// The name is folded with FNV-1a rather than the std hasher so the mapping
/// stays stable across Rust releases.
pub fn substream(seed: u64, name: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha12Rng::seed_from_u64(h)
}
