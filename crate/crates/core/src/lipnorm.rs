//! LipschitzNorm score normalizations and the closed-form Lipschitz bounds.
//!
//! Every normalization divides raw scores by a product of input norms so that
//! all scores land in `[-alpha, alpha]`. When the denominator vanishes the
//! scores are defined as zero and the result is flagged `degenerate`.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::ScoreFunction;
use crate::error::{contract, domain, Result};
use crate::matrix::{dot, Matrix};
use crate::norms::{max_col_norm, spectral_norm, two_inf_norm};
use crate::tape::{Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LipNormKind {
    /// `alpha * g / max{||g||_(2,inf), ||X^T||_(inf,2) * lipschitz}`.
    Generic { alpha: f64, lipschitz: f64 },
    /// `alpha * Q^T X / (||Q||_F ||X^T||_(inf,2))`.
    Linear { alpha: f64 },
    Transformer,
    GatEdge,
}

impl Default for LipNormKind {
    fn default() -> Self {
        LipNormKind::Linear { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScores {
    pub scores: Matrix,
    pub degenerate: bool,
}

pub(crate) fn frobenius_tape(t: &mut Tape, m: Var) -> Var {
    let sq = t.square(m);
    let s = t.sum_all(sq);
    t.sqrt(s)
}

/// `||X^T||_(inf,2)`: largest column 2-norm, as a `1 x 1` node.
pub(crate) fn max_col_norm_tape(t: &mut Tape, x: Var) -> Result<Var> {
    let sq = t.square(x);
    let cols = t.sum_cols(sq);
    let m = t.max_all(cols)?;
    Ok(t.sqrt(m))
}

/// `||G||_(2,inf)` as a `1 x 1` node.
pub(crate) fn two_inf_tape(t: &mut Tape, g: Var) -> Result<Var> {
    let n = t.value(g).cols();
    let a = t.abs(g);
    let at = t.transpose(a);
    let seg = Arc::new(Segments::from_offsets(vec![0, n])?);
    let row_max = t.segment_max(at, seg)?;
    Ok(frobenius_tape(t, row_max))
}

pub(crate) fn lipnorm_linear_tape(t: &mut Tape, q: &Matrix, x: Var) -> Result<Var> {
    if q.rows() != t.value(x).rows() {
        return Err(contract(format!(
            "lipnorm_linear: Q has {} rows, X has {}",
            q.rows(),
            t.value(x).rows()
        )));
    }
    let qt = t.leaf(q.transpose());
    let raw = t.matmul(qt, x)?;
    let xn = max_col_norm_tape(t, x)?;
    let c = t.scale(xn, q.frobenius());
    t.div_or_zero(raw, c)
}

pub fn lipnorm_linear(q: &Matrix, x: &Matrix) -> Result<NormalizedScores> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let s = lipnorm_linear_tape(&mut t, q, xv)?;
    Ok(NormalizedScores {
        scores: t.value(s).clone(),
        degenerate: q.frobenius() * max_col_norm(x) == 0.0,
    })
}

fn transformer_denominator(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let u = frobenius_tape(t, q);
    let vk = max_col_norm_tape(t, k)?;
    let w = max_col_norm_tape(t, v)?;
    let uv = t.mul(u, vk)?;
    let uw = t.mul(u, w)?;
    let vw = t.mul(vk, w)?;
    let m = t.maximum(uv, uw)?;
    t.maximum(m, vw)
}

pub(crate) fn lipnorm_transformer_tape(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (t.value(q).shape(), t.value(k).shape(), t.value(v).shape());
    if qs.0 != ks.0 || ks != vs {
        return Err(contract("lipnorm_transformer: Q, K, V shapes do not agree"));
    }
    let qt = t.transpose(q);
    let raw = t.matmul(qt, k)?;
    let c = transformer_denominator(t, q, k, v)?;
    t.div_or_zero(raw, c)
}

pub fn lipnorm_transformer(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<NormalizedScores> {
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
    let s = lipnorm_transformer_tape(&mut t, qv, kv, vv)?;
    let (u, v1, w) = (q.frobenius(), max_col_norm(k), max_col_norm(v));
    Ok(NormalizedScores {
        scores: t.value(s).clone(),
        degenerate: (u * v1).max(u * w).max(v1 * w) == 0.0,
    })
}

pub(crate) fn lipnorm_generic_tape(t: &mut Tape, g: Var, x: Var, lipschitz: f64, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if !(lipschitz >= 0.0) {
        return Err(domain("Lipschitz constant must be nonnegative"));
    }
    let gn = two_inf_tape(t, g)?;
    let xn = max_col_norm_tape(t, x)?;
    let xl = t.scale(xn, lipschitz);
    let c = t.maximum(gn, xl)?;
    let s = t.div_or_zero(g, c)?;
    Ok(t.scale(s, alpha))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

pub fn lipnorm_generic(g_tilde: &ScoreFunction, x: &Matrix, lipschitz: f64, alpha: f64) -> Result<NormalizedScores> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let g = g_tilde.build(&mut t, xv)?;
    let raw = t.value(g).clone();
    let s = lipnorm_generic_tape(&mut t, g, xv, lipschitz, alpha)?;
    Ok(NormalizedScores {
        scores: t.value(s).clone(),
        degenerate: two_inf_norm(&raw).max(max_col_norm(x) * lipschitz) == 0.0,
    })
}

/// Normalized GAT edge score
/// `(<a_i, x_i> + <a_j, x_j>) / sqrt((|a_i|^2 + |a_j|^2)(max_neighbor_norm^2 + |x_i|^2))`,
/// with `0 / 0 := 0`.
pub fn gat_edge_score(a_i: &[f64], a_j: &[f64], x_i: &[f64], x_j: &[f64], max_neighbor_norm: f64) -> f64 {
    let num = dot(a_i, x_i) + dot(a_j, x_j);
    let den = ((dot(a_i, a_i) + dot(a_j, a_j)) * (max_neighbor_norm.powi(2) + dot(x_i, x_i))).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundKind {
    /// Any score satisfying the three normalization assumptions with constant `alpha`.
    General { alpha: f64 },
    Linear,
    Transformer,
    /// Single output with scores `x_i^T v / max_j |x_j|`.
    DraftSingleOutput { v_norm: f64 },
}

impl FromStr for BoundKind {
    type Err = crate::Error;

    /// Parses `general`, `lipschitz`, `linear`, `transformer` (alpha 1, |v| 1/4 defaults).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" | "lipschitz" => Ok(BoundKind::General { alpha: 1.0 }),
            "linear" => Ok(BoundKind::Linear),
            "transformer" => Ok(BoundKind::Transformer),
            "draft_single_output" => Ok(BoundKind::DraftSingleOutput { v_norm: 0.25 }),
            other => Err(contract(format!("unknown bound kind `{other}`"))),
        }
    }
}

pub fn theoretical_bound(kind: BoundKind, m: usize, n: usize) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(domain("bound needs m, n >= 1"));
    }
    let ratio = (m as f64 / n as f64).sqrt();
    Ok(match kind {
        BoundKind::General { alpha } => {
            if !(alpha >= 0.0) {
                return Err(domain("alpha must be nonnegative"));
            }
            alpha.exp() * ratio + alpha * 8f64.sqrt()
        }
        BoundKind::Linear => 1f64.exp() * ratio + 8f64.sqrt(),
        BoundKind::Transformer => 3f64.sqrt().exp() * ratio + 2.0 * 6f64.sqrt(),
        BoundKind::DraftSingleOutput { v_norm } => {
            if !(v_norm >= 0.0) {
                return Err(domain("|v| must be nonnegative"));
            }
            1.0 / (1.0 + (n as f64 - 1.0) * (-2.0 * v_norm).exp()).sqrt() + 4.0 * v_norm
        }
    })
}

/// `l_att * ||W_O||_* * sqrt(sum_k ||W_k||_*^2)`.
pub fn multihead_bound(l_att: f64, w_o: &Matrix, w_list: &[Matrix]) -> Result<f64> {
    if !(l_att >= 0.0) {
        return Err(domain("per-head bound must be nonnegative"));
    }
    let mut sum = 0.0;
    for w in w_list {
        sum += spectral_norm(w)?.powi(2);
    }
    Ok(l_att * spectral_norm(w_o)? * sum.sqrt())
}

/// Product of per-layer bounds; the empty product is 1.
pub fn composition_bound(bounds: &[f64]) -> Result<f64> {
    if bounds.iter().any(|b| !(*b >= 0.0)) {
        return Err(domain("layer bounds must be nonnegative"));
    }
    Ok(bounds.iter().product())
}

/// Tape builder for a scalar normalizer `c(X)` (returns a `1 x 1` node).
pub type NormalizerBuilder = Arc<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

/// Outcome of [`check_thm2_assumptions`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thm2Check {
    /// `||g(X)||_inf <= alpha c(X)`.
    pub bounded_scores: bool,
    /// `||X^T||_(inf,2) |||Dg_X||| <= alpha c(X)`, using the spectral norm of the
    /// Jacobian, which upper-bounds the `F -> (2, inf)` operator norm.
    pub derivative_bound: bool,
    /// `||X^T||_(inf,2) |||Dc_X||| ||g(X)||_(2,inf) <= alpha c(X)^2`, with `Dc_X` taken
    /// from the autodiff subgradient (ties in the max resolve to the first argmax).
    pub normalizer_derivative: bool,
    /// `|||Dc_X||| <= lipschitz`, when a constant was supplied.
    pub normalizer_lipschitz: Option<bool>,
    pub c: f64,
    pub degenerate: bool,
}

/// Numerically evaluates the three normalization assumptions at one input.
pub fn check_thm2_assumptions(
    g_tilde: &ScoreFunction,
    c: &NormalizerBuilder,
    x: &Matrix,
    alpha: f64,
    lipschitz: Option<f64>,
) -> Result<Thm2Check> {
    const SLACK: f64 = 1.0 + 1e-9;
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let g = g_tilde.build(&mut t, xv)?;
    let cv = c(&mut t, xv)?;
    if t.value(cv).shape() != (1, 1) {
        return Err(contract("normalizer must return a 1x1 value"));
    }
    let c_val = t.value(cv)[(0, 0)];
    if c_val == 0.0 {
        return Ok(Thm2Check {
            bounded_scores: false,
            derivative_bound: false,
            normalizer_derivative: false,
            normalizer_lipschitz: None,
            c: 0.0,
            degenerate: true,
        });
    }
    let g_val = t.value(g).clone();
    let x_norm = max_col_norm(x);
    let dg = spectral_norm(&t.jacobian(g, xv)?)?;
    let dc = t.backward(cv)?.wrt(&t, xv).frobenius();
    Ok(Thm2Check {
        bounded_scores: g_val.max_abs() <= alpha * c_val * SLACK,
        derivative_bound: x_norm * dg <= alpha * c_val * SLACK,
        normalizer_derivative: x_norm * dc * two_inf_norm(&g_val) <= alpha * c_val * c_val * SLACK,
        normalizer_lipschitz: lipschitz.map(|l| dc <= l * SLACK),
        c: c_val,
        degenerate: false,
    })
}

/// Normalizer `||Q||_F ||X^T||_(inf,2)` of the linear LipschitzNorm.
pub fn linear_normalizer(q: &Matrix) -> NormalizerBuilder {
    let qf = q.frobenius();
    Arc::new(move |t: &mut Tape, x: Var| {
        let xn = max_col_norm_tape(t, x)?;
        Ok(t.scale(xn, qf))
    })
}

/// Normalizer `max{||g(X)||_(2,inf), ||X^T||_(inf,2) L}` of the generic LipschitzNorm.
pub fn generic_normalizer(g_tilde: ScoreFunction, lipschitz: f64) -> NormalizerBuilder {
    Arc::new(move |t: &mut Tape, x: Var| {
        let g = g_tilde.build(t, x)?;
        let gn = two_inf_tape(t, g)?;
        let xn = max_col_norm_tape(t, x)?;
        let xl = t.scale(xn, lipschitz);
        t.maximum(gn, xl)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReportRow {
    pub kind: String,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    pub theoretical: f64,
    pub empirical: f64,
    pub samples: usize,
    pub satisfied: bool,
}

impl BoundReportRow {
    pub fn new(kind: impl Into<String>, m: usize, n: usize, alpha: f64, theoretical: f64, empirical: f64, samples: usize) -> Self {
        Self {
            kind: kind.into(),
            m,
            n,
            alpha,
            theoretical,
            empirical,
            samples,
            satisfied: empirical <= theoretical * (1.0 + 1e-9),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_direct_example() {
        let q = Matrix::col_vector(&[1.0, 0.0]);
        let x = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let r = lipnorm_linear(&q, &x).unwrap();
        assert!(!r.degenerate);
        assert!((r.scores[(0, 0)] - 0.6).abs() < 1e-15);
        assert_eq!(r.scores[(0, 1)], 0.0);
    }

    #[test]
    fn linear_zero_denominator_is_degenerate() {
        let r = lipnorm_linear(&Matrix::zeros(2, 1), &Matrix::filled(2, 3, 1.0)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.scores, Matrix::zeros(1, 3));
        let r = lipnorm_linear(&Matrix::filled(2, 1, 1.0), &Matrix::zeros(2, 3)).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn transformer_denominator_examples() {
        // u = v = w = 1
        let q = Matrix::col_vector(&[0.6, 0.8]);
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = lipnorm_transformer(&q, &k, &k).unwrap();
        let raw = q.transpose().matmul(&k).unwrap();
        assert!(r.scores.max_abs_diff(&raw) < 1e-15);
        // u = 2, v = 3, w = 1 -> max{6, 2, 3} = 6
        let q = Matrix::col_vector(&[2.0, 0.0]);
        let k = Matrix::from_rows(&[vec![3.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let r = lipnorm_transformer(&q, &k, &v).unwrap();
        assert!((r.scores[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((r.scores[(0, 1)] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn generic_zero_and_alpha() {
        let x = Matrix::from_fn(2, 3, |i, j| (i as f64) - (j as f64) * 0.3);
        let zero = ScoreFunction::Linear(Matrix::zeros(2, 2));
        let r = lipnorm_generic(&zero, &x, 1.0, 1.0).unwrap();
        assert_eq!(r.scores, Matrix::zeros(2, 3));
        let g = ScoreFunction::Linear(Matrix::from_fn(2, 2, |i, j| 1.0 + (i * 2 + j) as f64));
        let a1 = lipnorm_generic(&g, &x, 2.0, 1.0).unwrap();
        let a2 = lipnorm_generic(&g, &x, 2.0, 2.0).unwrap();
        assert!(a2.scores.max_abs_diff(&a1.scores.scale(2.0)) < 1e-15);
    }

    #[test]
    fn gat_edge_examples() {
        let a = [1.0, 0.0];
        assert_eq!(gat_edge_score(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], &[1.0, 1.0], 4.0), 0.0);
        assert_eq!(gat_edge_score(&[0.0; 2], &[0.0; 2], &[0.0; 2], &[0.0; 2], 0.0), 0.0);
        // |(x_i | x_j)| <= sqrt(9 + 16) = 5, and sqrt(|a_i|^2 + |a_j|^2) = sqrt(2)
        let s = gat_edge_score(&a, &a, &[3.0, 0.0], &[4.0, 0.0], 4.0);
        assert!((s - 7.0 / (2f64.sqrt() * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn bound_values() {
        let lin = theoretical_bound(BoundKind::Linear, 4, 4).unwrap();
        assert!((lin - (1f64.exp() + 8f64.sqrt())).abs() < 1e-15);
        assert!((lin - 5.5467).abs() < 1e-4);
        let tr = theoretical_bound(BoundKind::Transformer, 7, 7).unwrap();
        assert!((tr - 10.5512).abs() < 1e-4);
        assert_eq!(theoretical_bound(BoundKind::General { alpha: 0.0 }, 3, 3).unwrap(), 1.0);
        assert!(theoretical_bound(BoundKind::Linear, 0, 3).is_err());
        assert!(matches!("nope".parse::<BoundKind>(), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn draft_bound_at_zero_v() {
        let b = theoretical_bound(BoundKind::DraftSingleOutput { v_norm: 0.0 }, 1, 9).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn composition_examples() {
        assert_eq!(composition_bound(&[2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(composition_bound(&[1.0; 17]).unwrap(), 1.0);
        assert_eq!(composition_bound(&[]).unwrap(), 1.0);
        assert!(composition_bound(&[-1.0]).is_err());
    }

    #[test]
    fn multihead_identity_and_zero() {
        let b = multihead_bound(3.5, &Matrix::identity(2), &[Matrix::identity(2)]).unwrap();
        assert!((b - 3.5).abs() < 1e-12);
        assert_eq!(multihead_bound(3.5, &Matrix::zeros(2, 2), &[Matrix::identity(2)]).unwrap(), 0.0);
    }

    #[test]
    fn thm2_linear_instance_holds() {
        let q = Matrix::from_fn(3, 2, |i, j| 0.4 * i as f64 - 0.7 * j as f64 + 0.1);
        let x = Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin());
        let g = ScoreFunction::Linear(q.clone());
        let r = check_thm2_assumptions(&g, &linear_normalizer(&q), &x, 1.0, Some(q.frobenius())).unwrap();
        assert!(r.bounded_scores && r.derivative_bound && r.normalizer_derivative);
        assert_eq!(r.normalizer_lipschitz, Some(true));
    }

    #[test]
    fn thm2_unnormalized_large_input_fails() {
        let q = Matrix::from_fn(3, 2, |i, j| 0.4 * i as f64 - 0.7 * j as f64 + 0.1);
        let x = Matrix::from_fn(3, 4, |i, j| 1e6 * ((i * 4 + j) as f64).sin());
        let one: NormalizerBuilder = Arc::new(|t: &mut Tape, _x: Var| Ok(t.leaf(Matrix::scalar(1.0))));
        let r = check_thm2_assumptions(&ScoreFunction::Linear(q), &one, &x, 1.0, None).unwrap();
        assert!(!r.derivative_bound);
    }

    #[test]
    fn thm2_zero_score_and_degenerate() {
        let x = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let zero = ScoreFunction::Linear(Matrix::zeros(2, 2));
        let one: NormalizerBuilder = Arc::new(|t: &mut Tape, _x: Var| Ok(t.leaf(Matrix::scalar(1.0))));
        assert!(check_thm2_assumptions(&zero, &one, &x, 1.0, None).unwrap().bounded_scores);
        let nil: NormalizerBuilder = Arc::new(|t: &mut Tape, _x: Var| Ok(t.leaf(Matrix::scalar(0.0))));
        assert!(check_thm2_assumptions(&zero, &nil, &x, 1.0, None).unwrap().degenerate);
    }
}
