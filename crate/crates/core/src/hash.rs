//! Seed-free hashing used for raw feature keys and feature indices.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the bytes of a raw feature key.
pub fn hash_str(key: &str) -> u64 {
    key.as_bytes().iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Finalizer from splitmix64.
#[inline]
pub(crate) fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of 64-bit parts into one hash.
///
/// `hash_key(&[template_id, key, state])` is the raw 64-bit feature hash;
/// it is reduced modulo the model dimension to get a weight index.
pub fn hash_key(parts: &[u64]) -> u64 {
    parts.iter().fold(FNV_OFFSET, |h, &p| {
        mix(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    })
}
