//! Attention layers, LipschitzNorm score normalization, entropy calibration of
//! neighborhood attention, and a gated graph-neural-network framework, together
//! with the numerical diagnostics used to check their Lipschitz bounds.
//!
//! Inputs follow the column convention: a `d x n` matrix holds `n` input
//! vectors of dimension `d`. Graph node features are the exception and use one
//! row per node.

pub mod attention;
pub mod datasets;
pub mod diagnostics;
pub mod entropy;
pub mod error;
pub mod finite_diff;
pub mod graph;
pub mod lipnorm;
pub mod matrix;
pub mod norms;
pub mod tape;

pub use attention::{
    attention, multi_head, softmax_jacobian, softmax_rows, transformer_attention, AttentionOutput,
    ScoreFunction, TransformerScale,
};
pub use error::{Error, Result};
pub use finite_diff::finite_diff_jacobian;
pub use lipnorm::{
    composition_bound, gat_edge_score, lipnorm_generic, lipnorm_linear, lipnorm_transformer,
    multihead_bound, theoretical_bound, BoundKind, BoundReportRow, LipNormKind, NormalizedScores,
};
pub use matrix::Matrix;
pub use norms::{matrix_norm, NormKind};
pub use tape::{Gradients, Segments, Tape, Var};
pub use datasets::{
    gen_synthetic_citation, gen_trees, load_graph, missing_vector_transform, save_graph, MissingVectorSpec, TreesSpec,
};
pub use diagnostics::{
    bound_report, empirical_lipschitz, gradient_flow, jacobian_operator_norm, GradientFlowReport, LipschitzEstimate,
};
pub use entropy::{calibrate_graph, calibrate_node, CalibrationResult, CalibrationStatus, NeighborhoodScores};
pub use graph::{
    LayerConfig, LayerKind, Mask, Model, ModelConfig, Normalization, OptimizerKind, SparseGraph, TrainConfig, TrainLog,
};
