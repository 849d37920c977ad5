//! Embedding-inversion laboratory: a toy decoder-only LM, attacks that
//! recover input text from its hidden states, a frequency-domain defense,
//! scoring, experiment orchestration and a split-inference service.

pub mod attacks;
pub mod defense;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod splitsvc;
pub mod tinylm;
pub mod tokenizer;

use std::hash::Hasher;

/// 64-bit FNV-1a of a byte string.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// 64-bit FNV-1a over the little-endian bit patterns of `values`.
pub fn fnv64_f64(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for v in values {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.finish()
}
