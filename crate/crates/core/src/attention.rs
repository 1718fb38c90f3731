//! Attention layers over column-organized inputs.
//!
//! Inputs are `d x n` matrices whose columns are the `n` input vectors. A score
//! function maps the input to an `m x n` score matrix, and attention returns
//! the `d x m` matrix whose columns are softmax-weighted averages of the inputs.
//!
//! Every layer is built on a [`Tape`], so the same code path gives values,
//! gradients and Jacobians. The plain-`Matrix` functions are thin wrappers.

use std::fmt;
use std::sync::Arc;

use crate::error::{contract, Result};
use crate::lipnorm::{self, LipNormKind};
use crate::matrix::Matrix;
use crate::tape::{softmax_rows_value, Tape, Var};

/// Tape builder for a custom score function: input node in, `m x n` scores out.
pub type ScoreBuilder = Arc<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

#[derive(Clone)]
pub enum ScoreFunction {
    /// `Q^T X` for a fixed `d x m` matrix `Q`.
    Linear(Matrix),
    /// `Q^T K` where `Q` is rows `0..split` of the input and `K` rows `split..2 * split`.
    Quadratic { split: usize },
    Custom(ScoreBuilder),
    /// `inner` followed by a LipschitzNorm rescaling.
    Normalized { inner: Box<ScoreFunction>, kind: LipNormKind },
}

impl fmt::Debug for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreFunction::Linear(q) => write!(f, "Linear({}x{})", q.rows(), q.cols()),
            ScoreFunction::Quadratic { split } => write!(f, "Quadratic {{ split: {split} }}"),
            ScoreFunction::Custom(_) => write!(f, "Custom"),
            ScoreFunction::Normalized { inner, kind } => {
                write!(f, "Normalized {{ inner: {inner:?}, kind: {kind:?} }}")
            }
        }
    }
}

impl ScoreFunction {
    pub fn normalized(self, kind: LipNormKind) -> Self {
        ScoreFunction::Normalized { inner: Box::new(self), kind }
    }

    /// Records the scores of input `x` on the tape.
    pub fn build(&self, t: &mut Tape, x: Var) -> Result<Var> {
        match self {
            ScoreFunction::Linear(q) => {
                if q.rows() != t.value(x).rows() {
                    return Err(contract(format!(
                        "linear score: Q has {} rows, input has {}",
                        q.rows(),
                        t.value(x).rows()
                    )));
                }
                let qt = t.leaf(q.transpose());
                t.matmul(qt, x)
            }
            ScoreFunction::Quadratic { split } => {
                let d = t.value(x).rows();
                if *split == 0 || 2 * split > d {
                    return Err(contract(format!("quadratic score: split {split} invalid for {d} rows")));
                }
                let xt = t.transpose(x);
                let q = t.slice_cols(xt, 0, *split)?;
                let k = t.slice_cols(xt, *split, *split)?;
                let kt = t.transpose(k);
                t.matmul(q, kt)
            }
            ScoreFunction::Custom(f) => f(t, x),
            ScoreFunction::Normalized { inner, kind } => match (kind, inner.as_ref()) {
                (LipNormKind::Linear { alpha }, ScoreFunction::Linear(q)) => {
                    let s = lipnorm::lipnorm_linear_tape(t, q, x)?;
                    Ok(t.scale(s, *alpha))
                }
                (LipNormKind::Linear { .. }, _) => {
                    Err(contract("linear LipschitzNorm needs a linear inner score"))
                }
                (LipNormKind::Generic { alpha, lipschitz }, inner) => {
                    let g = inner.build(t, x)?;
                    lipnorm::lipnorm_generic_tape(t, g, x, *lipschitz, *alpha)
                }
                (other, _) => Err(contract(format!(
                    "{other:?} normalization is not a score-function wrapper"
                ))),
            },
        }
    }

    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let s = self.build(&mut t, xv)?;
        Ok(t.value(s).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `d x m`.
    pub output: Matrix,
    /// `m x n`, row-stochastic.
    pub weights: Matrix,
    /// `m x n` pre-softmax scores.
    pub scores: Matrix,
}

/// Tape handles of an attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub output: Var,
    pub weights: Var,
    pub scores: Var,
}

impl AttentionVars {
    fn read(self, t: &Tape) -> AttentionOutput {
        AttentionOutput {
            output: t.value(self.output).clone(),
            weights: t.value(self.weights).clone(),
            scores: t.value(self.scores).clone(),
        }
    }
}

/// Row-wise softmax, shifted by each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    softmax_rows_value(m)
}

/// `J_ij = s_i (delta_ij - s_j)` for `s = softmax(x)`.
pub fn softmax_jacobian(x: &[f64]) -> Matrix {
    let s = softmax_rows(&Matrix::row_vector(x)).into_vec();
    let n = s.len();
    Matrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        s[i] * (delta - s[j])
    })
}

/// Directional derivative of row-softmax at `b` along `h`, from the closed form:
/// row `i` of the result is `J(b_i) h_i`.
pub fn softmax_directional(b: &Matrix, h: &Matrix) -> Result<Matrix> {
    if b.shape() != h.shape() {
        return Err(contract("softmax_directional: B and H shapes differ"));
    }
    let s = softmax_rows(b);
    Ok(Matrix::from_fn(b.rows(), b.cols(), |i, j| {
        let (si, hi) = (s.row(i), h.row(i));
        let mean: f64 = si.iter().zip(hi).map(|(a, b)| a * b).sum();
        si[j] * (hi[j] - mean)
    }))
}

/// Chi-squared divergence of `p` from the uniform distribution on `p.len()` atoms.
pub fn chi2_to_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|&x| (x - 1.0 / n).powi(2) * n).sum()
}

pub fn attention_tape(t: &mut Tape, x: Var, g: &ScoreFunction) -> Result<AttentionVars> {
    let scores = g.build(t, x)?;
    attend(t, x, scores)
}

/// `values * softmax(scores)^T` with the shape checks shared by all attention variants.
fn attend(t: &mut Tape, values: Var, scores: Var) -> Result<AttentionVars> {
    let (n_vals, n_scores) = (t.value(values).cols(), t.value(scores).cols());
    if n_vals != n_scores {
        return Err(contract(format!(
            "scores have {n_scores} columns but there are {n_vals} inputs"
        )));
    }
    let weights = t.softmax_rows(scores);
    let wt = t.transpose(weights);
    let output = t.matmul(values, wt)?;
    Ok(AttentionVars { output, weights, scores })
}

pub fn attention(x: &Matrix, g: &ScoreFunction) -> Result<AttentionOutput> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    Ok(attention_tape(&mut t, xv, g)?.read(&t))
}

fn check_heads(x_rows: usize, w_list: &[Matrix], w_o: &Matrix, heads: &[ScoreFunction]) -> Result<()> {
    if w_list.is_empty() {
        return Err(contract("multi-head attention needs at least one head"));
    }
    if heads.len() != 1 && heads.len() != w_list.len() {
        return Err(contract("give one score function, or one per head"));
    }
    let d = w_list[0].rows();
    for w in w_list {
        if w.rows() != d || w.cols() != x_rows {
            return Err(contract("every W_k must be d x d_in with a shared d"));
        }
    }
    if w_o.cols() != d * w_list.len() {
        return Err(contract(format!(
            "W_O has {} columns, concatenated heads have {}",
            w_o.cols(),
            d * w_list.len()
        )));
    }
    Ok(())
}

/// `W_O (Att_1(W_1 X) ; ... ; Att_h(W_h X))` with the head outputs stacked row-wise.
/// `heads` holds either a single score function shared by every head or one per head.
pub fn multi_head_tape(
    t: &mut Tape,
    x: Var,
    w_list: &[Matrix],
    w_o: &Matrix,
    heads: &[ScoreFunction],
) -> Result<Var> {
    check_heads(t.value(x).rows(), w_list, w_o, heads)?;
    let mut outs = Vec::with_capacity(w_list.len());
    for (k, w) in w_list.iter().enumerate() {
        let wv = t.leaf(w.clone());
        let hx = t.matmul(wv, x)?;
        let g = &heads[if heads.len() == 1 { 0 } else { k }];
        outs.push(attention_tape(t, hx, g)?.output);
    }
    let stacked = t.concat_rows(&outs)?;
    let wo = t.leaf(w_o.clone());
    t.matmul(wo, stacked)
}

pub fn multi_head(x: &Matrix, w_list: &[Matrix], w_o: &Matrix, heads: &[ScoreFunction]) -> Result<Matrix> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let out = multi_head_tape(&mut t, xv, w_list, w_o, heads)?;
    Ok(t.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformerScale {
    /// `Q^T K / sqrt(d)`.
    SqrtD,
    /// `Q^T K / max{uv, uw, vw}`.
    Lipschitz,
}

/// `V softmax(score(Q, K))^T` with `Q` of shape `d x m` and `K`, `V` of shape `d x n`.
pub fn transformer_attention_tape(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: TransformerScale,
) -> Result<AttentionVars> {
    let (qs, ks, vs) = (t.value(q).shape(), t.value(k).shape(), t.value(v).shape());
    if qs.0 != ks.0 || ks != vs {
        return Err(contract(format!(
            "transformer attention: Q {}x{}, K {}x{}, V {}x{} do not agree",
            qs.0, qs.1, ks.0, ks.1, vs.0, vs.1
        )));
    }
    let scores = match scale {
        TransformerScale::SqrtD => {
            let qt = t.transpose(q);
            let raw = t.matmul(qt, k)?;
            t.scale(raw, 1.0 / (qs.0 as f64).sqrt())
        }
        TransformerScale::Lipschitz => lipnorm::lipnorm_transformer_tape(t, q, k, v)?,
    };
    attend(t, v, scores)
}

pub fn transformer_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: TransformerScale) -> Result<AttentionOutput> {
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
    Ok(transformer_attention_tape(&mut t, qv, kv, vv, scale)?.read(&t))
}

/// Splits a `d x (m + 2n)` block `[Q | K | V]` into its parts on the tape.
pub fn split_qkv(t: &mut Tape, x: Var, m: usize) -> Result<(Var, Var, Var)> {
    let cols = t.value(x).cols();
    if cols < m || (cols - m) % 2 != 0 {
        return Err(contract(format!("cannot split {cols} columns into [Q | K | V] with m = {m}")));
    }
    let n = (cols - m) / 2;
    let q = t.slice_cols(x, 0, m)?;
    let k = t.slice_cols(x, m, n)?;
    let v = t.slice_cols(x, m + n, n)?;
    Ok((q, k, v))
}
