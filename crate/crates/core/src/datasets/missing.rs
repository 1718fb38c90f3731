use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::graph::{Mask, SparseGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingVectorSpec {
    pub p: f64,
    pub seed: u64,
}

/// Zeroes the feature rows of `round(p * |U|)` nodes drawn uniformly from the
/// non-train nodes `U`. Topology, labels and masks are untouched.
pub fn missing_vector_transform(graph: &SparseGraph, spec: &MissingVectorSpec) -> Result<SparseGraph> {
    if !(0.0..=1.0).contains(&spec.p) {
        return Err(contract("p must lie in [0, 1]"));
    }
    let pool: Vec<usize> = (0..graph.num_nodes()).filter(|&u| graph.masks[u] != Mask::Train).collect();
    let count = (spec.p * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = graph.clone();
    for i in index::sample(&mut rng, pool.len(), count) {
        out.features.row_mut(pool[i]).fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn graph() -> SparseGraph {
        let masks = (0..120).map(|i| if i < 20 { Mask::Train } else { Mask::Test }).collect();
        SparseGraph::from_edges(&[(0, 1), (1, 0)], Matrix::filled(120, 3, 1.0), vec![None; 120], masks, 1).unwrap()
    }

    fn zeroed(g: &SparseGraph) -> Vec<usize> {
        (0..g.num_nodes()).filter(|&u| g.features.row(u).iter().all(|&x| x == 0.0)).collect()
    }

    #[test]
    fn extremes() {
        let g = graph();
        assert_eq!(missing_vector_transform(&g, &MissingVectorSpec { p: 0.0, seed: 1 }).unwrap(), g);
        let all = missing_vector_transform(&g, &MissingVectorSpec { p: 1.0, seed: 1 }).unwrap();
        assert_eq!(zeroed(&all), (20..120).collect::<Vec<_>>());
    }

    #[test]
    fn half_zeroes_exactly_fifty() {
        let out = missing_vector_transform(&graph(), &MissingVectorSpec { p: 0.5, seed: 3 }).unwrap();
        let z = zeroed(&out);
        assert_eq!(z.len(), 50);
        assert!(z.iter().all(|&u| u >= 20));
        assert_eq!(out.edges().collect::<Vec<_>>(), graph().edges().collect::<Vec<_>>());
    }
}
