use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::layers::{GraphContext, Layer, LayerConfig, LayerVars, Normalization};
use super::params::{ParamId, ParamStore};
use super::sparse::SparseGraph;
use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerConfig>,
    /// Adds a linear classifier after the last layer. Without it the last
    /// layer's width must equal `num_classes`.
    pub readout: bool,
}

impl ModelConfig {
    /// `depth` identical layers followed by a linear readout.
    pub fn stack(in_dim: usize, num_classes: usize, layer: LayerConfig, depth: usize) -> Self {
        Self { in_dim, num_classes, layers: vec![layer; depth], readout: true }
    }
}

/// A stack of attention layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layers: Vec<Layer>,
    readout: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.layers.is_empty() {
            return Err(contract("a model needs at least one layer"));
        }
        if config.num_classes == 0 {
            return Err(contract("num_classes must be positive"));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut width = config.in_dim;
        for (i, lc) in config.layers.iter().enumerate() {
            let layer = Layer::new(lc.clone(), width, &mut params, &format!("layer{i}"), rng)?;
            width = lc.hidden_dim;
            layers.push(layer);
        }
        let readout = if config.readout {
            let w = params.add("readout.weight", Matrix::glorot(width, config.num_classes, rng));
            let b = params.add("readout.bias", Matrix::zeros(1, config.num_classes));
            Some((w, b))
        } else if width != config.num_classes {
            return Err(contract(format!(
                "without a readout the last layer must have width {}",
                config.num_classes
            )));
        } else {
            None
        };
        Ok(Self { config, params, layers, readout })
    }

    /// Same parameters, every layer switched to `normalization`.
    pub fn renormalized(&self, normalization: Normalization) -> Result<Self> {
        let mut m = self.clone();
        for (layer, cfg) in m.layers.iter_mut().zip(m.config.layers.iter_mut()) {
            layer.config.normalization = normalization;
            cfg.normalization = normalization;
            layer.config.validate()?;
        }
        Ok(m)
    }

    pub fn forward<R: RngCore + ?Sized>(
        &self,
        t: &mut Tape,
        p: &[Var],
        features: &Matrix,
        ctx: &GraphContext,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ModelVars> {
        let mut h = t.leaf(features.clone());
        let mut vars = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let lv = layer.forward(t, p, h, ctx, dropout_rng.as_deref_mut())?;
            h = if i < last || self.readout.is_some() { t.relu(lv.output) } else { lv.output };
            vars.push(lv);
        }
        let logits = match self.readout {
            Some((w, b)) => {
                let y = t.matmul(h, p[w.index()])?;
                t.add(y, p[b.index()])?
            }
            None => h,
        };
        Ok(ModelVars { logits, layers: vars })
    }

    /// Logits for every node, without dropout.
    pub fn logits(&self, graph: &SparseGraph) -> Result<Matrix> {
        let ctx = GraphContext::new(graph);
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut t, &p, &graph.features, &ctx, None)?;
        Ok(t.value(out.logits).clone())
    }

    pub fn predict(&self, graph: &SparseGraph) -> Result<Vec<usize>> {
        let logits = self.logits(graph)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Per layer, the parameters counted as attention parameters.
    pub fn attention_param_groups(&self) -> Vec<Vec<ParamId>> {
        self.layers.iter().map(|l| l.attention_params()).collect()
    }
}
