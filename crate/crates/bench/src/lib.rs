//! Shared fixtures for the criterion benchmarks.

use attnlipkit::{gen_synthetic_citation, LayerConfig, Matrix, Model, ModelConfig, NeighborhoodScores, Normalization, SparseGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, 1.0, &mut rng(seed))
}

/// The citation graph used by the gradient-explosion experiment.
pub fn citation() -> SparseGraph {
    gen_synthetic_citation(300, 3, 0.9, 16, 0).expect("valid generator arguments")
}

pub fn gat(graph: &SparseGraph, layers: usize, normalization: Normalization) -> Model {
    let layer = LayerConfig::gat(16, 1).with_normalization(normalization);
    let cfg = ModelConfig::stack(graph.feature_dim(), graph.num_classes, layer, layers);
    Model::new(cfg, &mut rng(0)).expect("valid model config")
}

/// `count` neighborhoods of `degree` standard-normal scores.
pub fn score_sets(count: usize, degree: usize) -> Vec<NeighborhoodScores> {
    let mut r = rng(1);
    (0..count)
        .map(|node| NeighborhoodScores { node, scores: (0..degree).map(|_| r.random_range(-3.0..3.0)).collect() })
        .collect()
}
