//! Stable seed derivation.
//!
//! Every random stream in the pipeline is keyed off a master seed plus a
//! path of labels, so partial reruns reproduce exactly the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `base` and a list of string/integer labels.
pub fn derive(base: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        part.feed(&mut hasher);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub trait SeedPart {
    fn feed(&self, hasher: &mut Sha256);
}

impl SeedPart for str {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update(self.as_bytes());
    }
}

impl SeedPart for &str {
    fn feed(&self, hasher: &mut Sha256) {
        (**self).feed(hasher)
    }
}

impl SeedPart for String {
    fn feed(&self, hasher: &mut Sha256) {
        self.as_str().feed(hasher)
    }
}

impl SeedPart for u64 {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update([0xfe]);
        hasher.update(self.to_le_bytes());
    }
}

impl SeedPart for usize {
    fn feed(&self, hasher: &mut Sha256) {
        (*self as u64).feed(hasher)
    }
}

impl SeedPart for &[u8] {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update(self);
    }
}
