//! Sparse graphs, attention layers over in-neighborhoods, models and training.

pub mod layers;
pub mod model;
pub mod params;
pub mod sparse;
pub mod train;

pub use layers::{
    attention_weights_with_self, gat_layer, graph_transformer_layer, gru_framework_step, neighbor_softmax_attention,
    self_confidence, FrameworkConfig, GraphContext, HeadCombine, Layer, LayerConfig, LayerKind, LayerVars,
    Normalization, Preset,
};
pub use model::{Model, ModelConfig, ModelVars};
pub use params::{Mlp, MlpSpec, ParamId, ParamStore};
pub use sparse::{Mask, MessageIndex, SparseGraph};
pub use train::{evaluate, train, OptimizerKind, TrainConfig, TrainLog, TrainRecord};
