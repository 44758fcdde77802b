//! Convergence-bound evaluation and pilot-based constant estimation.
//!
//! The round count needed to push the mean squared global gradient norm
//! under a threshold is modeled as `R(q) = alpha / (beta - sum_n a_n^2 / q_n)`.
//! The pair `(alpha, beta)` can either be derived from explicit smoothness /
//! variance constants ([`BoundParams`], mainly for testing) or fit from two
//! short pilot runs — one uniform-sampling, one full-sampling — that both
//! reach a common estimation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TrainingTrace;
use crate::system::{SamplingVector, SystemModel};

/// Trailing moving-average window used when reading round counts off noisy
/// loss traces.
pub const SMOOTH_WINDOW: usize = 5;

/// Explicit constants of the convergence bound.
///
/// The bound additionally assumes the step size is small enough for the
/// chosen sampling range: `eta <= 1/(4 L p)` with `p >= N * sum_n a_n^2/q_n`
/// (at full sampling `p = N * sum_n a_n^2` suffices, and `1/(4 L N^2)` is
/// always safe). These conditions are documentation-only here; nothing in the
/// crate computes with `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Learning rate.
    pub eta: f64,
    /// Gradient Lipschitz constant.
    pub lipschitz: f64,
    /// Stochastic-gradient variance bound.
    pub sigma_sq: f64,
    /// Gradient-divergence bound (degree of non-iid-ness).
    pub eps_sq: f64,
    /// Initial optimality gap `F(x_0) - F*`.
    pub f_gap: f64,
    /// Convergence threshold on the mean squared gradient norm.
    pub xi: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("eta", self.eta),
            ("lipschitz", self.lipschitz),
            ("sigma_sq", self.sigma_sq),
            ("eps_sq", self.eps_sq),
            ("f_gap", self.f_gap),
            ("xi", self.xi),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "bound parameter {name} = {v} must be positive"
                )));
            }
        }
        if self.xi <= self.eps_sq + self.sigma_sq {
            return Err(Error::InvalidConfig(format!(
                "threshold xi = {} must exceed eps_sq + sigma_sq = {}",
                self.xi,
                self.eps_sq + self.sigma_sq
            )));
        }
        Ok(())
    }
}

/// `sum_n a_n^2 / q_n` — the sampling-variance penalty of the bound.
pub fn inv_prob_weight_sum(model: &SystemModel, q: &SamplingVector) -> f64 {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    model
        .data_weights
        .iter()
        .zip(q.probs.iter())
        .map(|(&a, &qn)| a * a / qn)
        .sum()
}

/// Right-hand side of the convergence bound after `rounds` rounds:
/// `4 f_gap / (eta R) + 4 eta L N (eps^2 + sigma^2) sum_n a_n^2 / q_n`.
pub fn theorem1_rhs(
    params: &BoundParams,
    model: &SystemModel,
    q: &SamplingVector,
    rounds: usize,
) -> f64 {
    assert!(rounds >= 1, "need at least one round");
    let n = model.len() as f64;
    let first = 4.0 * params.f_gap / (params.eta * rounds as f64);
    let second = 4.0
        * params.eta
        * params.lipschitz
        * n
        * (params.eps_sq + params.sigma_sq)
        * inv_prob_weight_sum(model, q);
    first + second
}

/// The two pilot measurements behind a constant fit: round counts to the
/// estimation loss and the variance-penalty sums of the two reference
/// sampling schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotStats {
    /// Rounds the uniform-sampling pilot needed.
    pub rounds_uniform: usize,
    /// Rounds the full-sampling pilot needed.
    pub rounds_full: usize,
    /// Penalty sum under uniform sampling (`N * sum a_n^2`).
    pub c_uniform: f64,
    /// Penalty sum under full sampling (`sum a_n^2`).
    pub c_full: f64,
}

/// Fitted convergence constants plus the raw pilot measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub alpha: f64,
    pub beta: f64,
    pub pilot: PilotStats,
}

impl ConvergenceConstants {
    /// Builds constants directly from the four pilot measurements.
    pub fn from_pilot(pilot: PilotStats) -> Result<Self> {
        let r1 = pilot.rounds_uniform as f64;
        let r2 = pilot.rounds_full as f64;
        let (c1, c2) = (pilot.c_uniform, pilot.c_full);
        if pilot.rounds_uniform == pilot.rounds_full {
            return Err(Error::DegeneratePilot(format!(
                "both pilots crossed at round {}; the fit divides by R1 - R2",
                pilot.rounds_uniform
            )));
        }
        let beta = (r1 * c1 - r2 * c2) / (r1 - r2);
        let alpha = r1 * r2 * (c1 - c2) / (r1 - r2);
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::DegeneratePilot(format!(
                "fitted alpha = {alpha} not positive (R1 = {r1}, R2 = {r2})"
            )));
        }
        if !(beta > c2) || !beta.is_finite() {
            return Err(Error::DegeneratePilot(format!(
                "fitted beta = {beta} does not exceed the full-sampling penalty {c2}; \
                 the threshold is unreachable even at full sampling"
            )));
        }
        Ok(Self { alpha, beta, pilot })
    }
}

/// Predicted rounds to reach the threshold: `alpha / (beta - sum a_n^2/q_n)`.
///
/// Errors when the penalty sum reaches `beta` — such a `q` can never meet the
/// threshold.
pub fn predicted_rounds(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    q: &SamplingVector,
) -> Result<f64> {
    let s = inv_prob_weight_sum(model, q);
    if s >= consts.beta {
        return Err(Error::InfeasibleSampling(format!(
            "variance penalty {s} >= beta {}; threshold unreachable under this q",
            consts.beta
        )));
    }
    Ok(consts.alpha / (consts.beta - s))
}

/// Trailing moving average of a loss sequence (window [`SMOOTH_WINDOW`]).
pub fn smoothed_losses(losses: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= SMOOTH_WINDOW {
            acc -= losses[i - SMOOTH_WINDOW];
        }
        let w = (i + 1).min(SMOOTH_WINDOW);
        out.push(acc / w as f64);
    }
    out
}

/// First 1-based round whose smoothed loss is `<= f_s`.
pub fn first_crossing(losses: &[f64], f_s: f64) -> Option<usize> {
    smoothed_losses(losses)
        .iter()
        .position(|&l| l <= f_s)
        .map(|i| i + 1)
}

/// Fits `(alpha, beta)` from a uniform-sampling pilot and a full-sampling
/// pilot that both reach the estimation loss `f_s`.
///
/// Round counts are read from the first crossing of the smoothed loss; the
/// penalty sums are evaluated on the actual reference sampling vectors so
/// that [`predicted_rounds`] reproduces the pilot counts.
pub fn estimate_constants(
    trace_uniform: &TrainingTrace,
    trace_full: &TrainingTrace,
    f_s: f64,
    model: &SystemModel,
) -> Result<ConvergenceConstants> {
    let n = model.len();
    let losses_u: Vec<f64> = trace_uniform.losses();
    let losses_f: Vec<f64> = trace_full.losses();
    let r1 = first_crossing(&losses_u, f_s).ok_or(Error::PilotTooShort {
        f_s,
        rounds: losses_u.len(),
    })?;
    let r2 = first_crossing(&losses_f, f_s).ok_or(Error::PilotTooShort {
        f_s,
        rounds: losses_f.len(),
    })?;
    let c_uniform = inv_prob_weight_sum(model, &SamplingVector::uniform(n));
    let c_full = inv_prob_weight_sum(model, &SamplingVector::full(n));
    ConvergenceConstants::from_pilot(PilotStats {
        rounds_uniform: r1,
        rounds_full: r2,
        c_uniform,
        c_full,
    })
}
