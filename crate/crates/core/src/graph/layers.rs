//! Attention layers over in-neighborhoods: GAT, graph transformer, and the
//! gated framework where a self-confidence gate splits each node's mass between
//! its own update and its neighbors.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::params::{Mlp, MlpSpec, ParamId, ParamStore};
use super::sparse::{MessageIndex, SparseGraph};
use crate::entropy::{calibrate_graph, CalibrationResult, NeighborhoodScores};
use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Slope of the leaky ReLU applied to GAT scores.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gat,
    GraphTransformer,
    GruFramework,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    Concat,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Lipschitz,
    NeighborEntropy { target: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    /// Self weight fixed to [`FrameworkConfig::self_weight`].
    MemorylessGnn,
    /// No update term: the output is the gated neighbor average.
    GatLike,
    /// Self weight fixed to 1.
    GgnnLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkConfig {
    pub preset: Preset,
    pub phi: MlpSpec,
    pub psi: MlpSpec,
    pub psi_dim: usize,
    pub g: MlpSpec,
    pub update: MlpSpec,
    pub epsilon: f64,
    pub self_weight: f64,
    /// Project inputs with a learned matrix before aggregating.
    pub transform_first: bool,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            phi: MlpSpec::with_hidden(&[16]),
            psi: MlpSpec::linear(),
            psi_dim: 16,
            g: MlpSpec::linear(),
            update: MlpSpec::with_hidden(&[16]),
            epsilon: 0.0,
            self_weight: 1.0,
            transform_first: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub heads: usize,
    pub head_combine: HeadCombine,
    pub normalization: Normalization,
    /// Output width of the layer.
    pub hidden_dim: usize,
    pub attention_dropout: f64,
    /// Whether every node also attends to itself; `None` means on for GAT only.
    pub self_loops: Option<bool>,
    pub framework: FrameworkConfig,
}

impl LayerConfig {
    pub fn new(kind: LayerKind, hidden_dim: usize) -> Self {
        Self {
            kind,
            heads: 1,
            head_combine: HeadCombine::Concat,
            normalization: Normalization::None,
            hidden_dim,
            attention_dropout: 0.0,
            self_loops: None,
            framework: FrameworkConfig::default(),
        }
    }

    pub fn gat(hidden_dim: usize, heads: usize) -> Self {
        Self { heads, ..Self::new(LayerKind::Gat, hidden_dim) }
    }

    pub fn graph_transformer(hidden_dim: usize, heads: usize) -> Self {
        Self { heads, ..Self::new(LayerKind::GraphTransformer, hidden_dim) }
    }

    pub fn gru_framework(hidden_dim: usize, preset: Preset) -> Self {
        let mut c = Self::new(LayerKind::GruFramework, hidden_dim);
        c.framework.preset = preset;
        c
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn uses_self_loops(&self) -> bool {
        self.self_loops.unwrap_or(self.kind == LayerKind::Gat)
    }

    /// Width of one head's projection.
    pub fn head_dim(&self) -> usize {
        match self.head_combine {
            HeadCombine::Concat => self.hidden_dim / self.heads,
            HeadCombine::Average => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim == 0 {
            return Err(contract("heads and hidden_dim must be positive"));
        }
        if self.head_combine == HeadCombine::Concat && self.hidden_dim % self.heads != 0 {
            return Err(contract(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(contract("attention_dropout must lie in [0, 1)"));
        }
        if let Normalization::NeighborEntropy { target } = self.normalization {
            if !(target > 0.0 && target <= 1.0) {
                return Err(contract("entropy target must lie in (0, 1]"));
            }
        }
        if self.kind == LayerKind::GruFramework && self.heads != 1 {
            return Err(contract("the gated framework layer is single-head"));
        }
        let fw = &self.framework;
        if self.kind == LayerKind::GruFramework && !(0.0..=1.0).contains(&fw.self_weight) {
            return Err(contract("self_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Message layouts of one graph, with and without self loops.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub looped: MessageIndex,
    pub plain: MessageIndex,
    /// 1 for nodes without in-neighbors (in the plain layout), else 0; `n x 1`.
    pub isolated: Matrix,
}

impl GraphContext {
    pub fn new(graph: &SparseGraph) -> Self {
        let plain = MessageIndex::build(graph, false);
        let isolated = Matrix::from_fn(graph.num_nodes(), 1, |v, _| if plain.in_degree(v) == 0 { 1.0 } else { 0.0 });
        Self { looped: MessageIndex::build(graph, true), plain, isolated }
    }

    pub fn index(&self, self_loops: bool) -> &MessageIndex {
        if self_loops {
            &self.looped
        } else {
            &self.plain
        }
    }
}

/// Tape handles produced by one layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub output: Var,
    /// Per head, the `E x 1` softmax weights in message order.
    pub attention: Vec<Var>,
    /// Per head, the `E x 1` scores fed to the softmax.
    pub scores: Vec<Var>,
    /// Gated framework only: `a_uu` per node (`n x 1`).
    pub self_weight: Option<Var>,
    /// Per head, the per-node calibration when entropy normalization is on.
    pub calibration: Vec<Vec<CalibrationResult>>,
}

#[derive(Debug, Clone)]
enum LayerParams {
    Gat { w: ParamId, a_src: ParamId, a_dst: ParamId, bias: ParamId },
    Transformer { wq: ParamId, wk: ParamId, wv: ParamId, bias: ParamId },
    Framework { w: Option<ParamId>, phi: Mlp, psi: Mlp, g: Mlp, theta: Mlp },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub config: LayerConfig,
    pub in_dim: usize,
    params: LayerParams,
}

fn check_finite(t: &Tape, v: Var, what: &str) -> Result<()> {
    if t.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Multiplies each neighborhood's scores by its calibration constant (held fixed).
fn entropy_scale(t: &mut Tape, scores: Var, idx: &MessageIndex, target: f64) -> Result<(Var, Vec<CalibrationResult>)> {
    check_finite(t, scores, "attention scores")?;
    let vals = t.value(scores);
    let seg = &idx.segments;
    let sets: Vec<NeighborhoodScores> = (0..seg.count())
        .filter(|&v| !seg.range(v).is_empty())
        .map(|v| NeighborhoodScores { node: v, scores: seg.range(v).map(|e| vals[(e, 0)]).collect() })
        .collect();
    let (results, _) = calibrate_graph(&sets, target)?;
    let mut c = Matrix::zeros(idx.num_messages(), 1);
    for r in &results {
        for e in seg.range(r.node) {
            c[(e, 0)] = r.c;
        }
    }
    let cv = t.leaf(c);
    Ok((t.mul(scores, cv)?, results))
}

fn dropout<R: RngCore + ?Sized>(t: &mut Tape, weights: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = t.value(weights).shape();
            let keep = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) });
            let k = t.leaf(keep);
            t.mul(weights, k)
        }
        _ => Ok(weights),
    }
}

/// `sqrt(sum of squares)` of every row, `n x d -> n x 1`.
fn row_norms(t: &mut Tape, x: Var) -> Var {
    let sq = t.square(x);
    let s = t.sum_rows(sq);
    t.sqrt(s)
}

/// `sum_{messages into v} weight_e * values[src_e]`.
fn aggregate(t: &mut Tape, values: Var, weights: Var, idx: &MessageIndex) -> Result<Var> {
    t.weighted_aggregate(values, weights, idx.src.clone(), idx.segments.clone())
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(
        config: LayerConfig,
        in_dim: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (h, dh, out) = (config.heads, config.head_dim(), config.hidden_dim);
        let params = match config.kind {
            LayerKind::Gat => LayerParams::Gat {
                w: store.add(format!("{prefix}.weight"), Matrix::glorot(in_dim, h * dh, rng)),
                a_src: store.add(format!("{prefix}.att_src"), Matrix::glorot(dh, h, rng)),
                a_dst: store.add(format!("{prefix}.att_dst"), Matrix::glorot(dh, h, rng)),
                bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, out)),
            },
            LayerKind::GraphTransformer => LayerParams::Transformer {
                wq: store.add(format!("{prefix}.query"), Matrix::glorot(in_dim, h * dh, rng)),
                wk: store.add(format!("{prefix}.key"), Matrix::glorot(in_dim, h * dh, rng)),
                wv: store.add(format!("{prefix}.value"), Matrix::glorot(in_dim, h * dh, rng)),
                bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, out)),
            },
            LayerKind::GruFramework => {
                let fw = &config.framework;
                let w = if fw.transform_first {
                    Some(store.add(format!("{prefix}.weight"), Matrix::glorot(in_dim, out, rng)))
                } else if in_dim != out {
                    return Err(contract("without transform_first the layer must keep its width"));
                } else {
                    None
                };
                LayerParams::Framework {
                    w,
                    phi: Mlp::new(store, &format!("{prefix}.phi"), 2 * out, &fw.phi, 1, rng),
                    psi: Mlp::new(store, &format!("{prefix}.psi"), out, &fw.psi, fw.psi_dim, rng),
                    g: Mlp::new(store, &format!("{prefix}.g"), out + fw.psi_dim, &fw.g, 1, rng),
                    theta: Mlp::new(store, &format!("{prefix}.theta"), out, &fw.update, out, rng),
                }
            }
        };
        Ok(Self { config, in_dim, params })
    }

    /// Parameters whose gradients are tracked as attention gradients: the score
    /// vectors (GAT), the query and key projections (transformer), and the
    /// neighbor-score MLP (framework).
    pub fn attention_params(&self) -> Vec<ParamId> {
        match &self.params {
            LayerParams::Gat { a_src, a_dst, .. } => vec![*a_src, *a_dst],
            LayerParams::Transformer { wq, wk, .. } => vec![*wq, *wk],
            LayerParams::Framework { phi, .. } => phi.param_ids(),
        }
    }

    pub fn forward<R: RngCore + ?Sized>(
        &self,
        t: &mut Tape,
        p: &[Var],
        h: Var,
        ctx: &GraphContext,
        dropout_rng: Option<&mut R>,
    ) -> Result<LayerVars> {
        if t.value(h).cols() != self.in_dim {
            return Err(contract(format!(
                "layer expects width {}, got {}",
                self.in_dim,
                t.value(h).cols()
            )));
        }
        let idx = ctx.index(self.config.uses_self_loops());
        match &self.params {
            LayerParams::Gat { w, a_src, a_dst, bias } => {
                self.gat_forward(t, p, h, idx, (*w, *a_src, *a_dst, *bias), dropout_rng)
            }
            LayerParams::Transformer { wq, wk, wv, bias } => {
                self.transformer_forward(t, p, h, idx, (*wq, *wk, *wv, *bias), dropout_rng)
            }
            LayerParams::Framework { w, phi, psi, g, theta } => {
                self.framework_forward(t, p, h, idx, ctx, *w, (phi, psi, g, theta), dropout_rng)
            }
        }
    }

    fn combine_heads(&self, t: &mut Tape, heads: Vec<Var>, bias: Var) -> Result<Var> {
        let combined = if heads.len() == 1 {
            heads[0]
        } else {
            match self.config.head_combine {
                HeadCombine::Concat => t.concat_cols(&heads)?,
                HeadCombine::Average => {
                    let mut acc = heads[0];
                    for &hd in &heads[1..] {
                        acc = t.add(acc, hd)?;
                    }
                    t.scale(acc, 1.0 / heads.len() as f64)
                }
            }
        };
        t.add(combined, bias)
    }

    fn normalize_entropy(&self, t: &mut Tape, s: Var, idx: &MessageIndex, cal: &mut Vec<Vec<CalibrationResult>>) -> Result<Var> {
        match self.config.normalization {
            Normalization::NeighborEntropy { target } => {
                let (scaled, res) = entropy_scale(t, s, idx, target)?;
                cal.push(res);
                Ok(scaled)
            }
            _ => Ok(s),
        }
    }

    fn gat_forward<R: RngCore + ?Sized>(
        &self,
        t: &mut Tape,
        p: &[Var],
        h: Var,
        idx: &MessageIndex,
        (w, a_src, a_dst, bias): (ParamId, ParamId, ParamId, ParamId),
        mut rng: Option<&mut R>,
    ) -> Result<LayerVars> {
        let dh = self.config.head_dim();
        let z = t.matmul(h, p[w.index()])?;
        let (mut outs, mut attention, mut scores, mut calibration) = (vec![], vec![], vec![], vec![]);
        for k in 0..self.config.heads {
            let zk = t.slice_cols(z, k * dh, dh)?;
            let a_s = t.slice_cols(p[a_src.index()], k, 1)?;
            let a_d = t.slice_cols(p[a_dst.index()], k, 1)?;
            let es = t.matmul(zk, a_s)?;
            let ed = t.matmul(zk, a_d)?;
            let es_e = t.gather_rows(es, idx.src.clone())?;
            let ed_e = t.gather_rows(ed, idx.dst.clone())?;
            let mut raw = t.add(ed_e, es_e)?;
            if self.config.normalization == Normalization::Lipschitz {
                // sqrt((|a_dst|^2 + |a_src|^2) (max_{j in N(i)} |z_j|^2 + |z_i|^2))
                let sq_s = t.square(a_s);
                let sq_d = t.square(a_d);
                let na_s = t.sum_all(sq_s);
                let na_d = t.sum_all(sq_d);
                let a_norm = t.add(na_s, na_d)?;
                let zsq = t.square(zk);
                let z_norm = t.sum_rows(zsq);
                let z_src = t.gather_rows(z_norm, idx.src.clone())?;
                let z_max = t.segment_max(z_src, idx.segments.clone())?;
                let node_term = t.add(z_max, z_norm)?;
                let den_sq = t.mul(node_term, a_norm)?;
                let den_sq_e = t.gather_rows(den_sq, idx.dst.clone())?;
                let den = t.sqrt(den_sq_e);
                raw = t.div_or_zero(raw, den)?;
            }
            let s = t.leaky_relu(raw, GAT_LEAKY_SLOPE);
            let s = self.normalize_entropy(t, s, idx, &mut calibration)?;
            let alpha = t.segment_softmax(s, idx.segments.clone())?;
            let alpha_d = dropout(t, alpha, self.config.attention_dropout, rng.as_deref_mut())?;
            outs.push(aggregate(t, zk, alpha_d, idx)?);
            attention.push(alpha);
            scores.push(s);
        }
        let output = self.combine_heads(t, outs, p[bias.index()])?;
        Ok(LayerVars { output, attention, scores, self_weight: None, calibration })
    }

    fn transformer_forward<R: RngCore + ?Sized>(
        &self,
        t: &mut Tape,
        p: &[Var],
        h: Var,
        idx: &MessageIndex,
        (wq, wk, wv, bias): (ParamId, ParamId, ParamId, ParamId),
        mut rng: Option<&mut R>,
    ) -> Result<LayerVars> {
        let dh = self.config.head_dim();
        let q = t.matmul(h, p[wq.index()])?;
        let k = t.matmul(h, p[wk.index()])?;
        let v = t.matmul(h, p[wv.index()])?;
        let (mut outs, mut attention, mut scores, mut calibration) = (vec![], vec![], vec![], vec![]);
        for head in 0..self.config.heads {
            let qh = t.slice_cols(q, head * dh, dh)?;
            let kh = t.slice_cols(k, head * dh, dh)?;
            let vh = t.slice_cols(v, head * dh, dh)?;
            let q_e = t.gather_rows(qh, idx.dst.clone())?;
            let k_e = t.gather_rows(kh, idx.src.clone())?;
            let prod = t.mul(q_e, k_e)?;
            let raw = t.sum_rows(prod);
            let s = match self.config.normalization {
                Normalization::Lipschitz => {
                    // per receiving node: max{uv, uw, vw} with u = |q_i|, v, w = neighborhood max of |k_j|, |v_j|
                    let u = row_norms(t, qh);
                    let kn = row_norms(t, kh);
                    let vn = row_norms(t, vh);
                    let kn_e = t.gather_rows(kn, idx.src.clone())?;
                    let vn_e = t.gather_rows(vn, idx.src.clone())?;
                    let vmax = t.segment_max(kn_e, idx.segments.clone())?;
                    let wmax = t.segment_max(vn_e, idx.segments.clone())?;
                    let uv = t.mul(u, vmax)?;
                    let uw = t.mul(u, wmax)?;
                    let vw = t.mul(vmax, wmax)?;
                    let m = t.maximum(uv, uw)?;
                    let c = t.maximum(m, vw)?;
                    let c_e = t.gather_rows(c, idx.dst.clone())?;
                    t.div_or_zero(raw, c_e)?
                }
                _ => t.scale(raw, 1.0 / (dh as f64).sqrt()),
            };
            let s = self.normalize_entropy(t, s, idx, &mut calibration)?;
            let alpha = t.segment_softmax(s, idx.segments.clone())?;
            let alpha_d = dropout(t, alpha, self.config.attention_dropout, rng.as_deref_mut())?;
            outs.push(aggregate(t, vh, alpha_d, idx)?);
            attention.push(alpha);
            scores.push(s);
        }
        let output = self.combine_heads(t, outs, p[bias.index()])?;
        Ok(LayerVars { output, attention, scores, self_weight: None, calibration })
    }

    #[allow(clippy::too_many_arguments)]
    fn framework_forward<R: RngCore + ?Sized>(
        &self,
        t: &mut Tape,
        p: &[Var],
        h: Var,
        idx: &MessageIndex,
        ctx: &GraphContext,
        w: Option<ParamId>,
        (phi, psi, g, theta): (&Mlp, &Mlp, &Mlp, &Mlp),
        rng: Option<&mut R>,
    ) -> Result<LayerVars> {
        let fw = &self.config.framework;
        let n = t.value(h).rows();
        let z = match w {
            Some(w) => t.matmul(h, p[w.index()])?,
            None => h,
        };
        let mut calibration = vec![];
        let na = neighbor_attention(t, p, z, idx, phi, self.config.normalization, &mut calibration)?;
        let e_uv = dropout(t, na.weights, self.config.attention_dropout, rng)?;

        let e_u = match fw.preset {
            Preset::Full | Preset::GatLike => {
                let gate = self_confidence_tape(t, p, z, idx, g, psi)?;
                // isolated nodes keep all mass on themselves
                let iso = t.leaf(ctx.isolated.clone());
                let not_iso = t.leaf(ctx.isolated.map(|x| 1.0 - x));
                let gated = t.mul(gate, not_iso)?;
                t.add(gated, iso)?
            }
            Preset::MemorylessGnn => {
                let c = fw.self_weight;
                t.leaf(ctx.isolated.map(|x| if x == 1.0 { 1.0 } else { c }))
            }
            Preset::GgnnLike => t.leaf(Matrix::filled(n, 1, 1.0)),
        };
        let one_minus = {
            let neg = t.neg(e_u);
            t.add_scalar(neg, 1.0)
        };
        let gate_e = t.gather_rows(one_minus, idx.dst.clone())?;
        let a_uv = t.mul(gate_e, e_uv)?;
        let mut out = aggregate(t, z, a_uv, idx)?;
        if fw.preset != Preset::GatLike {
            let ones = t.leaf(Matrix::filled(idx.num_messages(), 1, 1.0));
            let neigh_sum = aggregate(t, z, ones, idx)?;
            let own = t.scale(z, 1.0 + fw.epsilon);
            let pre = t.add(own, neigh_sum)?;
            let upd = theta.forward(t, p, pre)?;
            let self_term = t.mul(upd, e_u)?;
            out = t.add(out, self_term)?;
        }
        Ok(LayerVars {
            output: out,
            attention: vec![na.weights],
            scores: vec![na.scores],
            self_weight: Some(e_u),
            calibration,
        })
    }
}

/// Neighbor scores and their per-neighborhood softmax.
#[derive(Debug, Clone, Copy)]
pub struct NeighborAttention {
    pub scores: Var,
    pub weights: Var,
}

/// `s_{u<-v} = phi(z_u || z_v)` over the messages of `idx`, optionally
/// normalized, then softmax within each receiving node's neighborhood.
pub fn neighbor_attention(
    t: &mut Tape,
    p: &[Var],
    z: Var,
    idx: &MessageIndex,
    phi: &Mlp,
    normalization: Normalization,
    calibration: &mut Vec<Vec<CalibrationResult>>,
) -> Result<NeighborAttention> {
    let zu = t.gather_rows(z, idx.dst.clone())?;
    let zv = t.gather_rows(z, idx.src.clone())?;
    let pair = t.concat_cols(&[zu, zv])?;
    let mut s = phi.forward(t, p, pair)?;
    match normalization {
        Normalization::None => {}
        Normalization::Lipschitz => {
            // s / max{ max_v |s_uv|, max_v |(z_u || z_v)| * L(phi) }, per receiving node
            let lip = phi.lipschitz_upper_tape(t, p)?;
            let abs = t.abs(s);
            let s_max = t.segment_max(abs, idx.segments.clone())?;
            let pn = row_norms(t, pair);
            let pn_max = t.segment_max(pn, idx.segments.clone())?;
            let in_term = t.mul(pn_max, lip)?;
            let c = t.maximum(s_max, in_term)?;
            let c_e = t.gather_rows(c, idx.dst.clone())?;
            s = t.div_or_zero(s, c_e)?;
        }
        Normalization::NeighborEntropy { target } => {
            let (scaled, res) = entropy_scale(t, s, idx, target)?;
            calibration.push(res);
            s = scaled;
        }
    }
    let weights = t.segment_softmax(s, idx.segments.clone())?;
    Ok(NeighborAttention { scores: s, weights })
}

/// `sigma(g(z_u || sum_{v in N(u)} psi(z_v)))`, `n x 1`.
pub fn self_confidence_tape(t: &mut Tape, p: &[Var], z: Var, idx: &MessageIndex, g: &Mlp, psi: &Mlp) -> Result<Var> {
    let pz = psi.forward(t, p, z)?;
    let ones = t.leaf(Matrix::filled(idx.num_messages(), 1, 1.0));
    let agg = aggregate(t, pz, ones, idx)?;
    let inp = t.concat_cols(&[z, agg])?;
    let logit = g.forward(t, p, inp)?;
    Ok(t.sigmoid(logit))
}

/// Self-confidence of a single node from its representation and its neighbors'.
/// An empty neighborhood gives 1.
pub fn self_confidence(h_u: &[f64], neighbors: &[Vec<f64>], g: &Mlp, psi: &Mlp, store: &ParamStore) -> Result<f64> {
    if neighbors.is_empty() {
        return Ok(1.0);
    }
    let d = h_u.len();
    let mut rows = vec![h_u.to_vec()];
    rows.extend(neighbors.iter().cloned());
    if rows.iter().any(|r| r.len() != d) {
        return Err(contract("neighbor representations must match the node's width"));
    }
    let z = Matrix::from_rows(&rows)?;
    let edges: Vec<(usize, usize)> = (1..rows.len()).map(|v| (v, 0)).collect();
    let n = rows.len();
    let graph = SparseGraph::from_edges(&edges, z.clone(), vec![None; n], vec![super::Mask::Unlabeled; n], 1)?;
    let idx = MessageIndex::build(&graph, false);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let zv = t.leaf(z);
    let e = self_confidence_tape(&mut t, &p, zv, &idx, g, psi)?;
    Ok(t.value(e)[(0, 0)])
}

/// `a_uu = e_u`, `a_uv = (1 - e_u) w_v`; returns the self weight and neighbor weights.
pub fn attention_weights_with_self(e_u: f64, neighbor_weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&e_u) {
        return Err(contract("self-confidence must lie in [0, 1]"));
    }
    if neighbor_weights.iter().any(|&w| !(w >= 0.0)) || (neighbor_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract("neighbor weights must be a probability vector"));
    }
    Ok((e_u, neighbor_weights.iter().map(|w| (1.0 - e_u) * w).collect()))
}

fn run_layer(h: &Matrix, graph: &SparseGraph, layer: &Layer, store: &ParamStore, kind: LayerKind) -> Result<Matrix> {
    if layer.config.kind != kind {
        return Err(contract(format!("expected a {kind:?} layer")));
    }
    if h.rows() != graph.num_nodes() {
        return Err(contract("one representation row per node is required"));
    }
    let ctx = GraphContext::new(graph);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let hv = t.leaf(h.clone());
    let out = layer.forward::<rand_chacha::ChaCha8Rng>(&mut t, &p, hv, &ctx, None)?;
    Ok(t.value(out.output).clone())
}

/// One GAT layer without the inter-layer nonlinearity.
pub fn gat_layer(h: &Matrix, graph: &SparseGraph, layer: &Layer, store: &ParamStore) -> Result<Matrix> {
    run_layer(h, graph, layer, store, LayerKind::Gat)
}

pub fn graph_transformer_layer(h: &Matrix, graph: &SparseGraph, layer: &Layer, store: &ParamStore) -> Result<Matrix> {
    run_layer(h, graph, layer, store, LayerKind::GraphTransformer)
}

pub fn gru_framework_step(h: &Matrix, graph: &SparseGraph, layer: &Layer, store: &ParamStore) -> Result<Matrix> {
    run_layer(h, graph, layer, store, LayerKind::GruFramework)
}

/// Per-message neighbor weights of a framework layer (message order of
/// [`MessageIndex::build`] without self loops).
pub fn neighbor_softmax_attention(h: &Matrix, graph: &SparseGraph, layer: &Layer, store: &ParamStore) -> Result<Vec<f64>> {
    let LayerParams::Framework { w, phi, .. } = &layer.params else {
        return Err(contract("neighbor_softmax_attention needs a framework layer"));
    };
    let idx = MessageIndex::build(graph, false);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let hv = t.leaf(h.clone());
    let z = match w {
        Some(w) => t.matmul(hv, p[w.index()])?,
        None => hv,
    };
    let na = neighbor_attention(&mut t, &p, z, &idx, phi, layer.config.normalization, &mut vec![])?;
    Ok(t.value(na.weights).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> SparseGraph {
        SparseGraph::from_edges(
            &[(0, 1), (1, 0), (1, 2), (2, 1)],
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            vec![None; 3],
            vec![Mask::Unlabeled; 3],
            1,
        )
        .unwrap()
    }

    #[test]
    fn attention_weights_examples() {
        assert_eq!(attention_weights_with_self(1.0, &[0.5, 0.5]).unwrap(), (1.0, vec![0.0, 0.0]));
        assert_eq!(attention_weights_with_self(0.0, &[0.5, 0.5]).unwrap(), (0.0, vec![0.5, 0.5]));
        let (s, w) = attention_weights_with_self(0.4, &[0.25, 0.75]).unwrap();
        assert_eq!(s, 0.4);
        assert!((w[0] - 0.15).abs() < 1e-15 && (w[1] - 0.45).abs() < 1e-15);
        assert!(attention_weights_with_self(0.4, &[0.2, 0.2]).is_err());
    }

    #[test]
    fn validate_rejects_bad_heads() {
        assert!(LayerConfig::gat(10, 3).validate().is_err());
        assert!(LayerConfig::gat(12, 3).validate().is_ok());
        let mut c = LayerConfig::gru_framework(4, Preset::Full);
        c.heads = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gat_incoming_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = Layer::new(LayerConfig::gat(4, 2), 2, &mut store, "l0", &mut rng).unwrap();
        let g = path3();
        let ctx = GraphContext::new(&g);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let h = t.leaf(g.features.clone());
        let out = layer.forward::<ChaCha8Rng>(&mut t, &p, h, &ctx, None).unwrap();
        for a in &out.attention {
            let w = t.value(*a);
            for v in 0..3 {
                let s: f64 = ctx.looped.segments.range(v).map(|e| w[(e, 0)]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(t.value(out.output).shape(), (3, 4));
    }

    #[test]
    fn self_confidence_midpoint_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let psi = Mlp::new(&mut store, "psi", 2, &MlpSpec::linear(), 2, &mut rng);
        let g = Mlp::new(&mut store, "g", 4, &MlpSpec::linear(), 1, &mut rng);
        store.set("g.0.weight", Matrix::zeros(4, 1)).unwrap();
        let e = self_confidence(&[0.3, 1.0], &[vec![1.0, 2.0]], &g, &psi, &store).unwrap();
        assert_eq!(e, 0.5);
        assert_eq!(self_confidence(&[0.3, 1.0], &[], &g, &psi, &store).unwrap(), 1.0);
    }
}
