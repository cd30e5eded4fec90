//! Content digests and keyed seed derivation.
//!
//! Both are SHA-256 based so values are stable across platforms and
//! toolchain versions.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

/// Incremental digest builder. Variable-length fields are length-prefixed so
/// distinct field sequences never collide by concatenation.
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Hasher(Sha256::new());
        h.str(domain);
        h
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.0.update(s.as_bytes());
        self
    }

    pub fn finish(&mut self) -> Digest {
        let out = std::mem::take(&mut self.0).finalize();
        Digest(out.into())
    }
}

/// Derive a 64-bit seed from a master seed and a sequence of labels.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Hasher::new("specvid.seed");
    h.u64(master);
    for l in labels {
        h.str(l);
    }
    let d = h.finish();
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// Per-block initial noise seed, shared by the drafter and, on rejection,
/// the target.
pub fn noise_seed(master: u64, prompt_id: &str, block_index: usize) -> u64 {
    let mut h = Hasher::new("specvid.noise");
    h.u64(master).str(prompt_id).u64(block_index as u64);
    let d = h.finish();
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}
