use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::graph::{Mask, SparseGraph};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreesSpec {
    pub depth: usize,
    pub num_trees: usize,
    pub seed: u64,
}

/// Node roles; the first four feature columns are their one-hot encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeRole {
    Root = 0,
    /// Green parent of two leaves, carrying a class and a cardinality.
    Green = 1,
    Interior = 2,
    /// Blue leaf.
    Leaf = 3,
}

pub const ROLE_COLUMNS: usize = 4;

impl TreesSpec {
    pub fn nodes_per_tree(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    /// Number of green nodes, which is also the number of classes and cardinalities.
    pub fn num_green(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn feature_dim(&self) -> usize {
        ROLE_COLUMNS + 2 * self.num_green()
    }
}

fn role_of(node: usize, depth: usize) -> TreeRole {
    // heap numbering: level of node i is floor(log2(i + 1))
    let level = (usize::BITS - 1 - (node + 1).leading_zeros()) as usize;
    match level {
        0 => TreeRole::Root,
        l if l == depth => TreeRole::Leaf,
        l if l == depth - 1 => TreeRole::Green,
        _ => TreeRole::Interior,
    }
}

/// Complete binary trees in heap order (node 0 is the root, children of `i` are
/// `2i + 1` and `2i + 2`). Edges point from child to parent so that messages
/// travel toward the root.
///
/// Features are `[role one-hot (4) | class one-hot (K) | cardinality one-hot (K)]`
/// with `K = 2^(depth - 1)` green nodes. Each green node gets a random class and
/// a distinct cardinality in `1..=K`; the root carries a query cardinality in the
/// cardinality block. The tree's label, stored on the root (the only train
/// node), is the class of the green node whose cardinality matches the query.
pub fn gen_trees(spec: &TreesSpec) -> Result<Vec<SparseGraph>> {
    if spec.depth < 2 {
        return Err(contract("TREES depth must be at least 2"));
    }
    if spec.depth > 16 {
        return Err(contract("TREES depth above 16 is not supported"));
    }
    let n = spec.nodes_per_tree();
    let k = spec.num_green();
    let dim = spec.feature_dim();
    let first_green = k - 1;
    let edges: Vec<(usize, usize)> = (1..n).map(|c| (c, (c - 1) / 2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_trees);
    for _ in 0..spec.num_trees {
        let mut features = Matrix::zeros(n, dim);
        for u in 0..n {
            features[(u, role_of(u, spec.depth) as usize)] = 1.0;
        }
        let mut cards: Vec<usize> = (0..k).collect();
        cards.shuffle(&mut rng);
        let classes: Vec<usize> = (0..k).map(|_| rng.random_range(0..k)).collect();
        for g in 0..k {
            let u = first_green + g;
            features[(u, ROLE_COLUMNS + classes[g])] = 1.0;
            features[(u, ROLE_COLUMNS + k + cards[g])] = 1.0;
        }
        let query = rng.random_range(0..k);
        features[(0, ROLE_COLUMNS + k + query)] = 1.0;
        let label = classes[cards.iter().position(|&c| c == query).expect("cardinalities are a permutation")];
        let mut labels = vec![None; n];
        labels[0] = Some(label);
        let mut masks = vec![Mask::Unlabeled; n];
        masks[0] = Mask::Train;
        out.push(SparseGraph::from_edges(&edges, features, labels, masks, k)?);
    }
    Ok(out)
}

/// Reads the answer off a generated tree by walking its green nodes.
pub fn tree_answer(tree: &SparseGraph, depth: usize) -> Option<usize> {
    let k = 1usize << (depth - 1);
    let f = &tree.features;
    let query = (0..k).find(|&c| f[(0, ROLE_COLUMNS + k + c)] == 1.0)?;
    let mut found = None;
    for u in 0..tree.num_nodes() {
        if f[(u, TreeRole::Green as usize)] == 1.0 && f[(u, ROLE_COLUMNS + k + query)] == 1.0 {
            if found.is_some() {
                return None;
            }
            found = (0..k).find(|&c| f[(u, ROLE_COLUMNS + c)] == 1.0);
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_two_has_seven_nodes() {
        let t = gen_trees(&TreesSpec { depth: 2, num_trees: 3, seed: 0 }).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].num_nodes(), 7);
        assert_eq!(t[0].num_edges(), 6);
        assert_eq!(t[0].num_classes, 2);
        assert_eq!(t[0].out_neighbors(3), &[1]);
    }

    #[test]
    fn depth_below_two_rejected() {
        assert!(gen_trees(&TreesSpec { depth: 1, num_trees: 1, seed: 0 }).is_err());
    }

    #[test]
    fn roles() {
        assert_eq!(role_of(0, 3), TreeRole::Root);
        assert_eq!(role_of(2, 3), TreeRole::Interior);
        assert_eq!(role_of(3, 3), TreeRole::Green);
        assert_eq!(role_of(6, 3), TreeRole::Green);
        assert_eq!(role_of(7, 3), TreeRole::Leaf);
        assert_eq!(role_of(14, 3), TreeRole::Leaf);
    }

    #[test]
    fn labels_match_traversal() {
        for depth in 2..=5 {
            let spec = TreesSpec { depth, num_trees: 100, seed: depth as u64 };
            for t in gen_trees(&spec).unwrap() {
                assert_eq!(t.labels[0], tree_answer(&t, depth));
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = TreesSpec { depth: 3, num_trees: 5, seed: 9 };
        assert_eq!(gen_trees(&spec).unwrap(), gen_trees(&spec).unwrap());
    }
}
