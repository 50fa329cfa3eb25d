//! Deterministic seed derivation so per-clip and per-site streams never
//! depend on iteration order.

/// Mixes a base seed with a list of tags (FNV-1a over the little-endian
/// bytes). Identical inputs give identical seeds on every platform.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x1000_0000_01b3;
    let mut h = OFFSET;
    for byte in base.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(PRIME);
    }
    for tag in tags {
        for byte in tag.to_le_bytes() {
            h = (h ^ byte as u64).wrapping_mul(PRIME);
        }
    }
    h
}

/// Seed tag for a string identifier, so clip ids can key a stream.
pub fn tag_str(s: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x1000_0000_01b3;
    let mut h = OFFSET;
    for &byte in s.as_bytes() {
        h = (h ^ byte as u64).wrapping_mul(PRIME);
    }
    h
}
