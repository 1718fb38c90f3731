//! Empirical Lipschitz estimates, Jacobian operator norms, gradient-flow
//! tracking and bound reports.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, split_qkv, transformer_attention_tape, ScoreFunction, TransformerScale};
use crate::error::{contract, domain, Error, Result};
use crate::graph::{train, Model, SparseGraph, TrainConfig};
use crate::lipnorm::{theoretical_bound, BoundKind, BoundReportRow, LipNormKind};
use crate::matrix::Matrix;
use crate::norms::spectral_norm;
use crate::tape::{Tape, Var};

/// Default perturbation size relative to `||X||_F`.
pub const DEFAULT_RELATIVE_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationScale {
    /// `||H||_F = s * ||X||_F` (falls back to `s` when `X = 0`).
    Relative(f64),
    Absolute(f64),
}

impl Default for PerturbationScale {
    fn default() -> Self {
        PerturbationScale::Relative(DEFAULT_RELATIVE_SCALE)
    }
}

impl PerturbationScale {
    fn size(self, x: &Matrix) -> f64 {
        match self {
            PerturbationScale::Relative(s) => {
                let n = x.frobenius();
                if n > 0.0 {
                    s * n
                } else {
                    s
                }
            }
            PerturbationScale::Absolute(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    RatioSampling,
    JacobianPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub empirical: f64,
    pub samples: usize,
    pub perturbation_scale: PerturbationScale,
    pub theoretical: Option<f64>,
    pub method: EstimateMethod,
}

impl LipschitzEstimate {
    pub fn with_theoretical(mut self, bound: f64) -> Self {
        self.theoretical = Some(bound);
        self
    }
}

/// Max over samples of `||f(X + H) - f(X)||_F / ||H||_F`, with `X` drawn by
/// `sampler` and `H` a Gaussian direction rescaled to the perturbation size.
/// Inputs are drawn sequentially from one seeded stream and evaluated in
/// parallel, so the result does not depend on the thread count.
pub fn empirical_lipschitz<F, S>(
    f: F,
    mut sampler: S,
    n_samples: usize,
    scale: PerturbationScale,
    seed: u64,
) -> Result<LipschitzEstimate>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
    S: FnMut(&mut ChaCha8Rng) -> Matrix,
{
    if n_samples == 0 {
        return Err(contract("empirical_lipschitz needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = sampler(&mut rng);
        if !x.is_finite() {
            return Err(Error::NonFinite("sampler produced a non-finite input".into()));
        }
        let mut h = Matrix::randn(x.rows(), x.cols(), 1.0, &mut rng);
        let hn = h.frobenius();
        let size = scale.size(&x);
        if !(size > 0.0) || hn == 0.0 {
            return Err(domain("perturbation size must be positive"));
        }
        h = h.scale(size / hn);
        pairs.push((x, h));
    }
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(x, h)| {
            let fx = f(x)?;
            let fy = f(&x.add(h)?)?;
            let r = fy.sub(&fx)?.frobenius() / h.frobenius();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite("Lipschitz ratio".into()))
            }
        })
        .collect::<Result<_>>()?;
    Ok(LipschitzEstimate {
        empirical: ratios.into_iter().fold(0.0, f64::max),
        samples: n_samples,
        perturbation_scale: scale,
        theoretical: None,
        method: EstimateMethod::RatioSampling,
    })
}

/// Spectral norm of the flattened Jacobian of `f` at `x`.
pub fn jacobian_operator_norm<F>(f: F, x: &Matrix) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let y = f(&mut t, xv)?;
    let jac = t.jacobian(y, xv)?;
    spectral_norm(&jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFlowReport {
    pub layers: usize,
    pub epochs: usize,
    /// `layers x epochs` attention-parameter gradient 2-norms.
    pub grad_norms: Matrix,
    pub losses: Vec<f64>,
    /// The run stopped on a non-finite loss or gradient before `epochs` ran out.
    pub diverged: bool,
}

impl GradientFlowReport {
    /// Largest norm over layers at one epoch.
    pub fn epoch_max(&self, epoch: usize) -> f64 {
        (0..self.layers).map(|l| self.grad_norms[(l, epoch)]).fold(0.0, f64::max)
    }

    /// Largest norm anywhere divided by the largest norm at epoch 0.
    pub fn growth(&self) -> f64 {
        if self.epochs == 0 {
            return 1.0;
        }
        let overall = self.grad_norms.as_slice().iter().cloned().fold(0.0, f64::max);
        overall / self.epoch_max(0)
    }

    /// `layer,epoch,grad_norm`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,epoch,grad_norm\n");
        for l in 0..self.layers {
            for e in 0..self.epochs {
                let _ = writeln!(s, "{l},{e},{:?}", self.grad_norms[(l, e)]);
            }
        }
        s
    }
}

/// Trains `model` with the gradient-flow hook armed.
pub fn gradient_flow(model: &mut Model, graph: &SparseGraph, cfg: &TrainConfig) -> Result<GradientFlowReport> {
    if model.layers.is_empty() {
        return Err(contract("gradient flow needs at least one attention layer"));
    }
    let cfg = TrainConfig { track_gradient_flow: true, ..cfg.clone() };
    let log = train(model, graph, &cfg)?;
    let grad_norms = log.gradient_flow.expect("hook was armed");
    Ok(GradientFlowReport {
        layers: grad_norms.rows(),
        epochs: grad_norms.cols(),
        grad_norms,
        losses: log.records.iter().map(|r| r.loss).collect(),
        diverged: log.diverged,
    })
}

/// Attention variants covered by [`bound_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSetup {
    /// `X softmax(Q^T X)^T`, compared against the linear LipschitzNorm bound.
    Linear,
    LinearLipschitz { alpha: f64 },
    /// `Q^T X` with the generic normalization, `L = ||Q||_2`.
    GenericLipschitz { alpha: f64 },
    /// `V softmax(Q^T K / sqrt(d))^T` on `X = [Q | K | V]`.
    Transformer,
    TransformerLipschitz,
}

impl AttentionSetup {
    pub fn name(self) -> &'static str {
        match self {
            AttentionSetup::Linear => "linear",
            AttentionSetup::LinearLipschitz { .. } => "linear_lipnorm",
            AttentionSetup::GenericLipschitz { .. } => "generic_lipnorm",
            AttentionSetup::Transformer => "transformer",
            AttentionSetup::TransformerLipschitz => "transformer_lipnorm",
        }
    }

    pub fn is_normalized(self) -> bool {
        !matches!(self, AttentionSetup::Linear | AttentionSetup::Transformer)
    }

    fn bound(self) -> (BoundKind, f64) {
        match self {
            AttentionSetup::Linear => (BoundKind::Linear, 1.0),
            AttentionSetup::LinearLipschitz { alpha } | AttentionSetup::GenericLipschitz { alpha } => {
                (BoundKind::General { alpha }, alpha)
            }
            AttentionSetup::Transformer | AttentionSetup::TransformerLipschitz => {
                (BoundKind::Transformer, 3f64.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub setup: AttentionSetup,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    /// Standard deviation of the sampled inputs.
    pub input_scale: f64,
}

/// Builds the attention map of one random instance of `cfg`.
pub fn attention_instance(cfg: &BoundConfig, rng: &mut ChaCha8Rng) -> Result<impl Fn(&Matrix) -> Result<Matrix> + Sync> {
    if cfg.d == 0 || cfg.m == 0 || cfg.n == 0 {
        return Err(contract("bound config dimensions must be positive"));
    }
    let q = Matrix::randn(cfg.d, cfg.m, 1.0, rng);
    let setup = cfg.setup;
    let m = cfg.m;
    let score = match setup {
        AttentionSetup::Linear => Some(ScoreFunction::Linear(q)),
        AttentionSetup::LinearLipschitz { alpha } => Some(ScoreFunction::Linear(q).normalized(LipNormKind::Linear { alpha })),
        AttentionSetup::GenericLipschitz { alpha } => {
            let lipschitz = spectral_norm(&q)?;
            Some(ScoreFunction::Linear(q).normalized(LipNormKind::Generic { alpha, lipschitz }))
        }
        AttentionSetup::Transformer | AttentionSetup::TransformerLipschitz => None,
    };
    Ok(move |x: &Matrix| -> Result<Matrix> {
        match &score {
            Some(g) => Ok(attention(x, g)?.output),
            None => {
                let scale = if setup == AttentionSetup::Transformer {
                    TransformerScale::SqrtD
                } else {
                    TransformerScale::Lipschitz
                };
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let (qv, kv, vv) = split_qkv(&mut t, xv, m)?;
                let out = transformer_attention_tape(&mut t, qv, kv, vv, scale)?;
                Ok(t.value(out.output).clone())
            }
        }
    })
}

/// Input width of `cfg`: `n` columns, or `m + 2n` for the transformer block.
pub fn input_cols(cfg: &BoundConfig) -> usize {
    match cfg.setup {
        AttentionSetup::Transformer | AttentionSetup::TransformerLipschitz => cfg.m + 2 * cfg.n,
        _ => cfg.n,
    }
}

/// One row per config: the theoretical bound and the max empirical estimate
/// over `seeds`, each seed drawing a fresh instance and `samples` inputs.
/// Unnormalized setups are reported against the bound of their normalized twin.
pub fn bound_report(configs: &[BoundConfig], seeds: &[u64], samples: usize) -> Result<Vec<BoundReportRow>> {
    if !configs.is_empty() && (seeds.is_empty() || samples == 0) {
        return Err(contract("bound report needs at least one seed and one sample"));
    }
    configs
        .iter()
        .map(|cfg| {
            let (kind, alpha) = cfg.setup.bound();
            let theoretical = theoretical_bound(kind, cfg.m, cfg.n)?;
            let mut empirical: f64 = 0.0;
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = attention_instance(cfg, &mut rng)?;
                let (d, cols, s) = (cfg.d, input_cols(cfg), cfg.input_scale);
                let est = empirical_lipschitz(
                    f,
                    |r| Matrix::randn(d, cols, s, r),
                    samples,
                    PerturbationScale::default(),
                    seed ^ 0x9e37_79b9_7f4a_7c15,
                )?;
                empirical = empirical.max(est.empirical);
            }
            Ok(BoundReportRow::new(cfg.setup.name(), cfg.m, cfg.n, alpha, theoretical, empirical, seeds.len() * samples))
        })
        .collect()
}

/// `kind,m,n,alpha,theoretical,empirical,samples,pass`.
pub fn bound_report_csv(rows: &[BoundReportRow]) -> String {
    let mut s = String::from("kind,m,n,alpha,theoretical,empirical,samples,pass\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?},{:?},{},{}",
            r.kind, r.m, r.n, r.alpha, r.theoretical, r.empirical, r.samples, r.satisfied
        );
    }
    s
}
