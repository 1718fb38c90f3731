use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};
use crate::graph::{Mask, SparseGraph};
use crate::matrix::Matrix;

/// Edges drawn per node before symmetrization.
pub const EDGES_PER_NODE: usize = 3;
/// Standard deviation of the per-node feature noise around its class mean.
pub const FEATURE_NOISE: f64 = 1.0;

/// Stochastic-block-model graph: node `i` has class `i mod classes` (after a
/// shuffle), each node draws [`EDGES_PER_NODE`] partners, same-class with
/// probability `homophily`, and edges are stored in both directions. Features
/// are a standard-normal class mean plus [`FEATURE_NOISE`] noise. Masks split
/// the nodes 60/20/20 into train/val/test.
pub fn gen_synthetic_citation(n: usize, classes: usize, homophily: f64, feat_dim: usize, seed: u64) -> Result<SparseGraph> {
    if classes == 0 || n < classes {
        return Err(contract("need at least one node per class"));
    }
    if !(0.0..=1.0).contains(&homophily) {
        return Err(contract("homophily must lie in [0, 1]"));
    }
    if classes == 1 && homophily < 1.0 {
        return Err(contract("a single class cannot have inter-class edges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label: Vec<usize> = (0..n).map(|i| i % classes).collect();
    label.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (u, &c) in label.iter().enumerate() {
        members[c].push(u);
    }

    let mut edges = Vec::with_capacity(2 * n * EDGES_PER_NODE);
    for u in 0..n {
        for _ in 0..EDGES_PER_NODE {
            let same = rng.random::<f64>() < homophily;
            let pool = if same {
                &members[label[u]]
            } else {
                let mut c = rng.random_range(0..classes - 1);
                if c >= label[u] {
                    c += 1;
                }
                &members[c]
            };
            let v = pool[rng.random_range(0..pool.len())];
            if v != u {
                edges.push((u, v));
                edges.push((v, u));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let means: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let features = Matrix::from_fn(n, feat_dim, |u, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        means[label[u]][j] + FEATURE_NOISE * z
    });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val) = ((n * 3) / 5, n / 5);
    let mut masks = vec![Mask::Test; n];
    for (rank, &u) in order.iter().enumerate() {
        if rank < n_train {
            masks[u] = Mask::Train;
        } else if rank < n_train + n_val {
            masks[u] = Mask::Val;
        }
    }
    SparseGraph::from_edges(&edges, features, label.into_iter().map(Some).collect(), masks, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_homophily_has_no_cross_edges() {
        let g = gen_synthetic_citation(90, 3, 1.0, 4, 1).unwrap();
        assert!(g.num_edges() > 0);
        assert!(g.edges().all(|(u, v)| g.labels[u] == g.labels[v]));
    }

    #[test]
    fn zero_homophily_has_only_cross_edges() {
        let g = gen_synthetic_citation(90, 3, 0.0, 4, 1).unwrap();
        assert!(g.edges().all(|(u, v)| g.labels[u] != g.labels[v]));
    }

    #[test]
    fn symmetric_and_split() {
        let g = gen_synthetic_citation(100, 4, 0.8, 3, 5).unwrap();
        assert!(g.edges().all(|(u, v)| g.out_neighbors(v).contains(&u)));
        assert_eq!(g.nodes_with(Mask::Train).len(), 60);
        assert_eq!(g.nodes_with(Mask::Val).len(), 20);
        assert_eq!(g.nodes_with(Mask::Test).len(), 20);
    }

    #[test]
    fn same_seed_same_graph() {
        assert_eq!(gen_synthetic_citation(50, 2, 0.9, 3, 7).unwrap(), gen_synthetic_citation(50, 2, 0.9, 3, 7).unwrap());
        assert!(gen_synthetic_citation(2, 3, 0.5, 1, 0).is_err());
    }
}
