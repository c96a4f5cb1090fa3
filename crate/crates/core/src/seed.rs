//! Deterministic random streams split from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(root, subsystem, index)`. Changing any of
/// the three yields an unrelated stream; the same triple always yields the
/// same stream.
pub fn stream(root: u64, subsystem: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&root.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(subsystem.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"inrgan\0\0");
    ChaCha8Rng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
