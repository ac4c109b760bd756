use sha2::{Digest, Sha256};

/// Stable seed derived from a tuple of integers. Independent of platform,
/// toolchain and process, unlike `std::hash`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
