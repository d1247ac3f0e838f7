//! Deterministic, independent random streams keyed by integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator keyed by `seed` and up to three further integers, e.g.
/// `(seed, epoch, index)`. Distinct keys give unrelated streams.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    assert!(parts.len() <= 3, "at most three key parts");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, p) in parts.iter().enumerate() {
        key[8 * (i + 1)..8 * (i + 2)].copy_from_slice(&p.to_le_bytes());
    }
    // Distinguish (s, [0]) from (s, []) by the key length tag in the stream id.
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(parts.len() as u64);
    rng
}
