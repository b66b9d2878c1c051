//! Sub-seeds: the first eight bytes (little endian) of `SHA-256(seed_le ‖ purpose)`.

use sha2::{Digest, Sha256};

pub fn derive(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of a text, used to fingerprint cases.
pub fn fingerprint(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_split() {
        assert_eq!(derive(1, "in-sample"), derive(1, "in-sample"));
        assert_ne!(derive(1, "in-sample"), derive(1, "mixture"));
        assert_ne!(derive(1, "in-sample"), derive(2, "in-sample"));
    }

    #[test]
    fn fingerprint_is_sha256() {
        assert_eq!(fingerprint(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
