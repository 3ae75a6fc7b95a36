//! Fixtures shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbe_core::{EmbeddingSet, FlatIndex, Geometry, NormMode, RecurrentBinaryCode};

/// Uniformly random codes: every sign bit is a fair coin.
pub fn random_codes(geom: Geometry, n: usize, seed: u64) -> Vec<RecurrentBinaryCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wpp = geom.words_per_plane();
    let tail = geom.code_dim % 64;
    (0..n)
        .map(|_| {
            let words = (0..geom.bits_per_dim * wpp)
                .map(|i| {
                    let w: u64 = rng.random();
                    if tail != 0 && i % wpp == wpp - 1 {
                        w & ((1u64 << tail) - 1)
                    } else {
                        w
                    }
                })
                .collect();
            RecurrentBinaryCode::from_words(geom.code_dim, geom.bits_per_dim, words).expect("valid code words")
        })
        .collect()
}

/// A flat index over `n` random codes with ids `0..n`.
pub fn random_index(geom: Geometry, n: usize, seed: u64) -> FlatIndex {
    let codes = random_codes(geom, n, seed);
    let ids: Vec<u64> = (0..n as u64).collect();
    FlatIndex::build(geom, &codes, &ids, NormMode::Exact).expect("index over random codes")
}

/// `n` random unit vectors of dimension `dim`.
pub fn random_unit_vectors(dim: usize, n: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(dim * n);
    for _ in 0..n {
        let row: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        data.extend(row.into_iter().map(|v| v / norm));
    }
    EmbeddingSet::from_rows(dim, data).expect("finite rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic_and_valid() {
        let geom = Geometry::new(100, 2).unwrap();
        let a = random_codes(geom, 5, 1);
        assert_eq!(a, random_codes(geom, 5, 1));
        assert!(a.iter().all(|c| c.code_dim() == 100 && c.bits_per_dim() == 2));
        assert_eq!(random_index(geom, 7, 2).len(), 7);
        let v = random_unit_vectors(8, 3, 0);
        let n: f32 = v.row(1).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
