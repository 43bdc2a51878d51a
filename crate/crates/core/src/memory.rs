//! Closed-form attention memory counts.
//!
//! A vanilla transformer over the patched pair sequence holds about
//! `3·⌈S/P⌉ · 8d` activations; one BRT block needs `9·2B · 8d`, independent
//! of the sequence length.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub seq_len: u64,
    pub patch: u64,
    pub block: u64,
    pub d: u64,
    pub vanilla_elements: u64,
    pub brt_per_block_elements: u64,
}

impl MemoryEstimate {
    pub fn new(seq_len: u64, patch: u64, block: u64, d: u64) -> Result<Self> {
        if seq_len == 0 || patch == 0 || block == 0 || d == 0 {
            return Err(Error::Usage("S, P, B and d must all be positive".into()));
        }
        let width = 8 * d;
        Ok(MemoryEstimate {
            seq_len,
            patch,
            block,
            d,
            vanilla_elements: 3 * seq_len.div_ceil(patch) * width,
            brt_per_block_elements: 9 * 2 * block * width,
        })
    }

    /// Whether `P` divides `S`; otherwise the patch count was rounded up.
    pub fn exact(&self) -> bool {
        self.seq_len % self.patch == 0
    }

    pub fn ratio(&self) -> f64 {
        self.vanilla_elements as f64 / self.brt_per_block_elements as f64
    }
}
