//! Seed derivation: every random stream is addressed by `(seed, purpose tag)`.
//!
//! The top-level seed selects the ChaCha key and the tag (hashed with FNV-1a)
//! selects the stream, so adding a new consumer never shifts existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag.as_bytes()));
    rng
}

/// Stream for a tag with an integer suffix, e.g. the shuffle of epoch 3.
pub fn indexed_stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{tag}/{index}"))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
