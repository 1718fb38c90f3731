//! Shannon-efficiency calibration of neighborhood attention scores.
//!
//! For a neighborhood with scores `s`, the efficiency of `softmax(w s)` is its
//! entropy divided by `ln N`. It equals 1 at `w = 0` and is non-increasing in
//! `w`, so a per-node constant `c` hitting a target efficiency `T` can be found
//! by bisection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_EVALS: usize = 100;
/// Upper end of the search interval for the scaling constant.
pub const W_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodScores {
    pub node: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Converged,
    DegenerateSingleton,
    DegenerateUniform,
    TargetUnreachable,
}

impl CalibrationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationStatus::Converged => "converged",
            CalibrationStatus::DegenerateSingleton => "degenerate_singleton",
            CalibrationStatus::DegenerateUniform => "degenerate_uniform",
            CalibrationStatus::TargetUnreachable => "target_unreachable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub node: usize,
    pub c: f64,
    /// Efficiency of the unscaled scores.
    pub eta_before: f64,
    pub achieved_eta: f64,
    pub status: CalibrationStatus,
    /// Number of efficiency evaluations spent, including `eta_before`.
    pub evaluations: usize,
}

/// Entropy `H = -sum p ln p` (with `0 ln 0 = 0`) and efficiency `H / ln N`
/// (1 when `N = 1`).
pub fn entropy_and_efficiency(p: &[f64]) -> Result<(f64, f64)> {
    if p.is_empty() {
        return Err(contract("empty probability vector"));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(contract("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(contract(format!("probabilities sum to {sum}, not 1")));
    }
    let h = entropy(p);
    Ok((h, efficiency_of(h, p.len())))
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn efficiency_of(h: f64, n: usize) -> f64 {
    if n < 2 {
        1.0
    } else {
        (h / (n as f64).ln()).clamp(0.0, 1.0)
    }
}

/// Efficiency of `softmax(w * scores)`.
pub fn scaled_efficiency(scores: &[f64], w: f64) -> f64 {
    let n = scores.len();
    if n < 2 {
        return 1.0;
    }
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(w * s));
    let min = scores.iter().fold(f64::INFINITY, |a, &s| a.min(w * s));
    if max == min {
        return 1.0;
    }
    let mut p: Vec<f64> = scores.iter().map(|&s| (w * s - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    efficiency_of(entropy(&p), n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialGuess {
    pub value: f64,
    /// Set when the scores have zero variance and the fixed seed 1 is returned.
    pub fallback: bool,
}

/// `sqrt(2 (ln N - T ln N) / Var(scores))`, with the population variance.
pub fn initial_guess(scores: &[f64], target: f64) -> Result<InitialGuess> {
    check_target(target)?;
    let n = scores.len();
    if n < 2 {
        return Err(contract("initial guess needs at least two scores"));
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Ok(InitialGuess { value: 1.0, fallback: true });
    }
    let ln_n = (n as f64).ln();
    Ok(InitialGuess { value: (2.0 * (ln_n - target * ln_n) / var).sqrt(), fallback: false })
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(contract(format!("target efficiency must lie in (0, 1], got {target}")));
    }
    Ok(())
}

/// Finds `c >= 0` with `|scaled_efficiency(scores, c) - target| <= tol`.
pub fn calibrate_node(scores: &[f64], target: f64, tol: f64, max_evals: usize) -> Result<CalibrationResult> {
    calibrate_indexed(0, scores, target, tol, max_evals)
}

fn calibrate_indexed(node: usize, scores: &[f64], target: f64, tol: f64, max_evals: usize) -> Result<CalibrationResult> {
    check_target(target)?;
    if scores.is_empty() {
        return Err(contract(format!("node {node} has no scores")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(contract(format!("node {node} has non-finite scores")));
    }
    let degenerate = |status| CalibrationResult {
        node,
        c: 1.0,
        eta_before: 1.0,
        achieved_eta: 1.0,
        status,
        evaluations: 0,
    };
    if scores.len() == 1 {
        return Ok(degenerate(CalibrationStatus::DegenerateSingleton));
    }
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let argmax_count = scores.iter().filter(|&&s| s == top).count();
    if argmax_count == scores.len() {
        return Ok(degenerate(CalibrationStatus::DegenerateUniform));
    }

    let counter = std::cell::Cell::new(0usize);
    let eta = |w: f64| {
        counter.set(counter.get() + 1);
        scaled_efficiency(scores, w)
    };
    let eta_before = eta(1.0);
    let done = |c: f64, achieved: f64, status| CalibrationResult {
        node,
        c,
        eta_before,
        achieved_eta: achieved,
        status,
        evaluations: counter.get(),
    };

    if 1.0 - target <= tol {
        return Ok(done(0.0, 1.0, CalibrationStatus::Converged));
    }
    // efficiency as w -> infinity: uniform over the tied maxima
    let floor = (argmax_count as f64).ln() / (scores.len() as f64).ln();
    if target < floor - tol {
        let e = eta(W_MAX);
        return Ok(done(W_MAX, e, CalibrationStatus::TargetUnreachable));
    }

    let guess = initial_guess(scores, target)?.value;
    let (mut lo, mut hi) = (0.0, if guess > 0.0 && guess.is_finite() { guess.min(W_MAX) } else { 1.0 });
    let mut e_hi = eta(hi);
    while e_hi - target > tol {
        if hi >= W_MAX {
            return Ok(done(hi, e_hi, CalibrationStatus::TargetUnreachable));
        }
        if counter.get() >= max_evals {
            return Err(contract(format!("node {node}: evaluation budget exhausted while bracketing")));
        }
        lo = hi;
        hi = (2.0 * hi).min(W_MAX);
        e_hi = eta(hi);
    }
    if (e_hi - target).abs() <= tol {
        return Ok(done(hi, e_hi, CalibrationStatus::Converged));
    }
    // invariant: eta(lo) > target + tol, eta(hi) < target - tol
    while counter.get() < max_evals {
        let mid = 0.5 * (lo + hi);
        let e = eta(mid);
        if (e - target).abs() <= tol {
            return Ok(done(mid, e, CalibrationStatus::Converged));
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(contract(format!("node {node}: calibration did not converge in {max_evals} evaluations")))
}

/// Calibrates every neighborhood independently (in parallel) and returns the
/// results together with the rescaled scores `c_u * s_uv`, both in input order.
pub fn calibrate_graph(
    score_sets: &[NeighborhoodScores],
    target: f64,
) -> Result<(Vec<CalibrationResult>, Vec<NeighborhoodScores>)> {
    check_target(target)?;
    let results: Vec<CalibrationResult> = score_sets
        .par_iter()
        .map(|s| calibrate_indexed(s.node, &s.scores, target, DEFAULT_TOL, DEFAULT_MAX_EVALS))
        .collect::<Result<_>>()?;
    let scaled = score_sets
        .iter()
        .zip(&results)
        .map(|(s, r)| NeighborhoodScores { node: s.node, scores: s.scores.iter().map(|x| x * r.c).collect() })
        .collect();
    Ok((results, scaled))
}
