use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::tape::Segments;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Mask {
    pub fn as_str(self) -> &'static str {
        match self {
            Mask::Train => "train",
            Mask::Val => "val",
            Mask::Test => "test",
            Mask::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mask {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mask::Train),
            "val" => Ok(Mask::Val),
            "test" => Ok(Mask::Test),
            "unlabeled" => Ok(Mask::Unlabeled),
            other => Err(contract(format!("unknown mask `{other}`"))),
        }
    }
}

/// Directed graph in CSR form (edges grouped by source) with one feature row,
/// optional label and split mask per node.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<Option<usize>>,
    pub masks: Vec<Mask>,
    pub num_classes: usize,
}

impl SparseGraph {
    /// Builds the CSR structure from an edge list; edges are sorted by `(src, dst)`.
    pub fn from_edges(
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<Option<usize>>,
        masks: Vec<Mask>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        let mut offsets = vec![0; n + 1];
        for &(s, t) in &sorted {
            if s >= n || t >= n {
                return Err(contract(format!("edge ({s}, {t}) out of range for {n} nodes")));
            }
            offsets[s + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let targets = sorted.into_iter().map(|(_, t)| t).collect();
        Self::from_csr(offsets, targets, features, labels, masks, num_classes)
    }

    pub fn from_csr(
        offsets: Vec<usize>,
        targets: Vec<usize>,
        features: Matrix,
        labels: Vec<Option<usize>>,
        masks: Vec<Mask>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if offsets.len() != n + 1 || offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(contract("CSR offsets must be monotone with n + 1 entries starting at 0"));
        }
        if offsets[n] != targets.len() {
            return Err(contract("last CSR offset must equal the edge count"));
        }
        if targets.iter().any(|&t| t >= n) {
            return Err(contract("edge target out of range"));
        }
        if labels.len() != n || masks.len() != n {
            return Err(contract("labels and masks need one entry per node"));
        }
        if labels.iter().flatten().any(|&l| l >= num_classes) {
            return Err(contract("label out of range"));
        }
        Ok(Self { offsets, targets, features, labels, masks, num_classes })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn out_neighbors(&self, u: usize) -> &[usize] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    /// All edges as `(src, dst)` in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| self.out_neighbors(u).iter().map(move |&v| (u, v)))
    }

    pub fn nodes_with(&self, mask: Mask) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&u| self.masks[u] == mask).collect()
    }

    /// Adds the reverse of every edge and drops duplicates.
    pub fn symmetrized(&self) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = self.edges().flat_map(|(u, v)| [(u, v), (v, u)]).collect();
        edges.sort_unstable();
        edges.dedup();
        Self::from_edges(&edges, self.features.clone(), self.labels.clone(), self.masks.clone(), self.num_classes)
    }

    /// Relabels node `u` as `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(contract("not a permutation of the node ids"));
        }
        let mut features = Matrix::zeros(n, self.feature_dim());
        let mut labels = vec![None; n];
        let mut masks = vec![Mask::Unlabeled; n];
        for u in 0..n {
            features.row_mut(perm[u]).copy_from_slice(self.features.row(u));
            labels[perm[u]] = self.labels[u];
            masks[perm[u]] = self.masks[u];
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::from_edges(&edges, features, labels, masks, self.num_classes)
    }

    /// Places the graphs side by side, shifting node ids; all must share feature
    /// dimension and class count.
    pub fn disjoint_union(graphs: &[SparseGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| contract("union of zero graphs"))?;
        let (dim, classes) = (first.feature_dim(), first.num_classes);
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut data = Vec::with_capacity(total * dim);
        let (mut offsets, mut targets) = (vec![0usize], Vec::new());
        let (mut labels, mut masks) = (Vec::with_capacity(total), Vec::with_capacity(total));
        let mut base = 0;
        for g in graphs {
            if g.feature_dim() != dim || g.num_classes != classes {
                return Err(contract("graphs in a union must share feature dimension and classes"));
            }
            data.extend_from_slice(g.features.as_slice());
            let shift = *offsets.last().unwrap();
            offsets.extend(g.offsets[1..].iter().map(|o| o + shift));
            targets.extend(g.targets.iter().map(|t| t + base));
            labels.extend_from_slice(&g.labels);
            masks.extend_from_slice(&g.masks);
            base += g.num_nodes();
        }
        Self::from_csr(offsets, targets, Matrix::new(total, dim, data)?, labels, masks, classes)
    }
}

/// Message layout for attention over in-neighborhoods: one entry per message
/// `src -> dst`, grouped into contiguous segments by `dst`.
#[derive(Debug, Clone)]
pub struct MessageIndex {
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub segments: Arc<Segments>,
}

impl MessageIndex {
    /// With `self_loops`, every node also receives a message from itself
    /// (unless the graph already has that edge).
    pub fn build(graph: &SparseGraph, self_loops: bool) -> Self {
        let n = graph.num_nodes();
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (u, v) in graph.edges() {
            incoming[v].push(u);
        }
        let mut src = Vec::with_capacity(graph.num_edges() + if self_loops { n } else { 0 });
        let mut dst = Vec::with_capacity(src.capacity());
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for (v, sources) in incoming.iter_mut().enumerate() {
            if self_loops && !sources.contains(&v) {
                sources.push(v);
            }
            sources.sort_unstable();
            for &u in sources.iter() {
                src.push(u);
                dst.push(v);
            }
            offsets.push(src.len());
        }
        Self {
            src: Arc::new(src),
            dst: Arc::new(dst),
            segments: Arc::new(Segments::from_offsets(offsets).expect("offsets are monotone by construction")),
        }
    }

    pub fn num_messages(&self) -> usize {
        self.src.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.segments.count()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.segments.range(v).len()
    }
}
