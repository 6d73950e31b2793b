//! Deterministic inputs shared by the benchmarks.

use spikevae::{ModelConfig, Tensor};

/// Pseudo-random values in `[lo, hi)` from a fixed xorshift stream.
pub fn filled(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut s = seed | 1;
    Tensor::from_fn(shape.to_vec(), |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        lo + (hi - lo) * (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

/// Desk-scale configuration at batch size `batch`.
pub fn desk(batch: usize) -> ModelConfig {
    ModelConfig {
        batch_size: batch,
        ..ModelConfig::desk()
    }
}
