//! Stable 64-bit hashing used for seed derivation and request fingerprints.
//!
//! Everything here is FNV-1a so that seeds can be reproduced outside Rust.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn write_str(&mut self, s: &str) -> &mut Self {
        self.write(s.as_bytes())
    }

    pub fn write_u64(&mut self, v: u64) -> &mut Self {
        self.write(&v.to_le_bytes())
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    Fnv1a::new().write(bytes).finish()
}

/// Per-session seed: FNV-1a over the UTF-8 concatenation of the decimal
/// campaign seed, the model id and the client id, with no separators.
pub fn session_seed(campaign_seed: u64, model_id: &str, client_id: &str) -> u64 {
    Fnv1a::new()
        .write_str(&campaign_seed.to_string())
        .write_str(model_id)
        .write_str(client_id)
        .finish()
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    Fnv1a::new().write_u64(parent).write_str(label).finish()
}
