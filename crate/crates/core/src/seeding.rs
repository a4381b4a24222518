//! Deterministic seed derivation so every stage and episode draws from its
//! own independent stream.

/// SplitMix64 step; good enough to decorrelate derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed, a domain tag and an index.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(parent);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}
