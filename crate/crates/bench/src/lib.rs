//! Fixtures shared by the benchmarks.

use edgeformer::{Batch, Model, ModelConfig, Tensor};

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(&[rows, cols], |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// Tied 12+2 model at width `d` with a small vocabulary.
pub fn edgeformer(d: usize, vocab: usize) -> Model {
    let mut c = ModelConfig::edgeformer(d);
    c.heads = (d / 16).max(1);
    c.vocab_size = vocab;
    c.max_len = 64;
    Model::new(c, 1).expect("valid bench config")
}

/// `batch` pairs of `len`-token source and target sequences.
pub fn batch(batch: usize, len: usize, vocab: usize) -> Batch {
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..batch)
        .map(|b| {
            let seq: Vec<u32> = (0..len).map(|i| 4 + ((b * 7 + i * 3) % (vocab - 4)) as u32).collect();
            (seq.clone(), seq.into_iter().rev().collect())
        })
        .collect();
    Batch::from_pairs(&pairs).expect("nonempty batch")
}
