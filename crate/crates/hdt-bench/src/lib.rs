//! Shared fixtures for the criterion benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdt_core::BinaryCode;

/// Deterministic random codes of the given width.
pub fn random_codes(count: usize, bits: usize, seed: u64) -> Vec<BinaryCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut words = [0u64; 4];
            for w in words.iter_mut().take(bits.div_ceil(64)) {
                *w = rng.gen();
            }
            // Mask and rebuild through the public constructor so padding
            // invariants hold for any width.
            let vals: Vec<f64> = (0..bits)
                .map(|k| {
                    let bit = bits - 1 - k;
                    if words[bit / 64] >> (bit % 64) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            hdt_core::binarize(&vals).expect("width is in range")
        })
        .collect()
}

/// Deterministic random vectors.
pub fn random_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}
