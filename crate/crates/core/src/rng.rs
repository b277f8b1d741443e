//! Seeded random streams.
//!
//! Every randomized stage (data generation, weight init, shuffling, ...)
//! draws from its own labeled stream derived from one master seed, so a stage
//! never shifts another stage's draws when its own draw count changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 stream for `(seed, label)`.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// FNV-1a, used for stream labels and schema fingerprints.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
