//! Deterministic train/val/test assignment by source image.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DatagenError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        let total: f64 = all.iter().sum();
        if all.iter().any(|r| !(*r >= 0.0)) || !(total > 0.0) {
            return Err(DatagenError::Config(format!(
                "split ratios must be nonnegative with a positive sum, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// First 8 bytes of the SHA-256 of the length-prefixed parts.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Every patch of a source lands in the same split.
pub fn assign_split(source_id: &str, ratios: &SplitRatios, seed: u64) -> Split {
    let u = (stable_hash(&[&seed.to_le_bytes(), source_id.as_bytes()]) >> 11) as f64
        / (1u64 << 53) as f64;
    let total = ratios.train + ratios.val + ratios.test;
    let t = u * total;
    if t < ratios.train {
        Split::Train
    } else if t < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}
