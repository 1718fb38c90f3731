use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::GraphContext;
use super::model::Model;
use super::sparse::{Mask, SparseGraph};
use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record per-layer attention-parameter gradient norms every epoch.
    pub track_gradient_flow: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, optimizer: OptimizerKind::Adam, lr: 0.005, weight_decay: 5e-4, seed: 0, track_gradient_flow: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// `layers x epochs`; column `j` holds the gradients taken at epoch `j`,
    /// before that epoch's update.
    pub gradient_flow: Option<Matrix>,
    /// Training stopped early on a non-finite loss or gradient.
    pub diverged: bool,
}

impl TrainLog {
    pub fn final_record(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

fn accuracy(pred: &[usize], graph: &SparseGraph, mask: Mask) -> Option<f64> {
    let nodes: Vec<usize> = graph.nodes_with(mask).into_iter().filter(|&u| graph.labels[u].is_some()).collect();
    if nodes.is_empty() {
        return None;
    }
    let hits = nodes.iter().filter(|&&u| graph.labels[u] == Some(pred[u])).count();
    Some(hits as f64 / nodes.len() as f64)
}

fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Accuracy of the model on the labeled nodes of `mask`, `None` if there are none.
pub fn evaluate(model: &Model, graph: &SparseGraph, mask: Mask) -> Result<Option<f64>> {
    Ok(accuracy(&model.predict(graph)?, graph, mask))
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Full-batch training with mean cross-entropy over labeled train nodes. The
/// weight decay is an L2 term added to every gradient.
pub fn train(model: &mut Model, graph: &SparseGraph, cfg: &TrainConfig) -> Result<TrainLog> {
    let targets: Vec<(usize, usize)> = graph
        .nodes_with(Mask::Train)
        .into_iter()
        .filter_map(|u| graph.labels[u].map(|l| (u, l)))
        .collect();
    if targets.is_empty() {
        return Err(contract("no labeled train nodes"));
    }
    if !(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) {
        return Err(contract("lr and weight_decay must be nonnegative"));
    }
    if graph.feature_dim() != model.config.in_dim {
        return Err(contract("graph features do not match the model input width"));
    }
    let targets = Arc::new(targets);
    let ctx = GraphContext::new(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let uses_dropout = model.layers.iter().any(|l| l.config.attention_dropout > 0.0);
    let groups = model.attention_param_groups();
    let mut flow: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut adam = Adam {
        m: model.params.values().iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
        v: model.params.values().iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
        step: 0,
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;

    for epoch in 0..cfg.epochs {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t);
        let out = match model.forward(&mut t, &p, &graph.features, &ctx, Some(&mut rng)) {
            Ok(o) => o,
            Err(Error::NonFinite(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = t.softmax_cross_entropy(out.logits, targets.clone())?;
        let loss_value = t.value(loss)[(0, 0)];
        if !loss_value.is_finite() {
            diverged = true;
            break;
        }
        let grads = t.backward(loss)?;
        let grads: Vec<Matrix> = p.iter().map(|&v| grads.wrt(&t, v)).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        if cfg.track_gradient_flow {
            for (row, group) in flow.iter_mut().zip(&groups) {
                let sq: f64 = group.iter().map(|id| grads[id.index()].frobenius().powi(2)).sum();
                row.push(sq.sqrt());
            }
        }

        let pred = if uses_dropout { model.predict(graph)? } else { argmax_rows(t.value(out.logits)) };
        records.push(TrainRecord {
            epoch,
            loss: loss_value,
            train_acc: accuracy(&pred, graph, Mask::Train),
            val_acc: accuracy(&pred, graph, Mask::Val),
            test_acc: accuracy(&pred, graph, Mask::Test),
        });

        adam.step += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(adam.step), 1.0 - ADAM_BETA2.powi(adam.step));
        for (i, (value, grad)) in model.params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (adam.m[i].as_mut_slice(), adam.v[i].as_mut_slice());
            for (k, (w, g)) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
                let g = g + cfg.weight_decay * *w;
                match cfg.optimizer {
                    OptimizerKind::Sgd => *w -= cfg.lr * g,
                    OptimizerKind::Adam => {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                        *w -= cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }

    let gradient_flow = if cfg.track_gradient_flow {
        let epochs = flow.first().map_or(0, Vec::len);
        Some(Matrix::from_fn(flow.len(), epochs, |l, e| flow[l][e]))
    } else {
        None
    };
    Ok(TrainLog { records, gradient_flow, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerConfig, ModelConfig};

    fn two_cluster() -> SparseGraph {
        let mut edges = vec![];
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    edges.push((a, b));
                    edges.push((a + 4, b + 4));
                }
            }
        }
        let features = Matrix::from_fn(8, 2, |i, j| if (i < 4) == (j == 0) { 1.0 } else { 0.0 });
        let labels = (0..8).map(|i| Some(usize::from(i >= 4))).collect();
        SparseGraph::from_edges(&edges, features, labels, vec![Mask::Train; 8], 2).unwrap()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let g = two_cluster();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::new(ModelConfig::stack(2, 2, LayerConfig::gat(4, 2), 2), &mut rng).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig { epochs: 5, lr: 0.0, weight_decay: 0.0, ..Default::default() };
        train(&mut m, &g, &cfg).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn no_train_nodes_is_error() {
        let mut g = two_cluster();
        g.masks = vec![Mask::Test; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::new(ModelConfig::stack(2, 2, LayerConfig::gat(4, 1), 1), &mut rng).unwrap();
        assert!(train(&mut m, &g, &TrainConfig::default()).is_err());
    }

    #[test]
    fn learns_separable_clusters() {
        let g = two_cluster();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::new(ModelConfig::stack(2, 2, LayerConfig::gat(4, 1), 1), &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 200, lr: 0.05, track_gradient_flow: true, ..Default::default() };
        let log = train(&mut m, &g, &cfg).unwrap();
        assert_eq!(log.final_record().unwrap().train_acc, Some(1.0));
        assert_eq!(log.gradient_flow.unwrap().shape(), (1, 200));
    }
}
