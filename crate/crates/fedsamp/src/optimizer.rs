//! Sampling-probability optimization.
//!
//! The wall-clock objective is the product of the predicted round count
//! `alpha / (beta - sum a_n^2/q_n)` and the linear per-round cost
//! `sum q_n c_n` with `c_n = t_n/f_tot + tau_n`. The product is non-convex,
//! so it is split: the per-round cost is pinned to a budget `M`, the round
//! count factor is overbounded by the separable convex surrogate
//! `sum alpha q_n / (N beta q_n - a_n^2 N^2)` (harmonic mean <= arithmetic
//! mean), and the resulting problem is solved exactly for each `M` on a grid
//! by a water-filling step: stationarity gives the closed form
//!
//! ```text
//! q_n(lambda) = a_n^2 N / beta + (a_n / beta) * sqrt(alpha / (lambda c_n))
//! ```
//!
//! clipped to the box, with the multiplier found by bisection on the budget
//! constraint. Candidates from all grid points are ranked by the true
//! (unsurrogated) objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{inv_prob_weight_sum, predicted_rounds, ConvergenceConstants};
use crate::error::{Error, Result};
use crate::system::{SamplingVector, SystemModel};
use crate::timing::{cost_coefficients, linear_round_time_bound};

/// Knobs of the grid search and the inner KKT solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Number of equal steps across the feasible budget interval.
    pub m_grid_steps: usize,
    /// Relative slack closing the open per-client lower bound.
    pub lower_bound_slack: f64,
    /// Relative (to `M`) tolerance on the budget-constraint residual.
    pub kkt_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            m_grid_steps: 200,
            lower_bound_slack: 1e-9,
            kkt_tolerance: 1e-10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_grid_steps < 2 {
            return Err(Error::InvalidConfig(format!(
                "m_grid_steps = {} must be >= 2",
                self.m_grid_steps
            )));
        }
        if !(self.lower_bound_slack > 0.0) {
            return Err(Error::InvalidConfig("lower_bound_slack must be positive".into()));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::InvalidConfig("kkt_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub m: f64,
    pub objective: f64,
    pub q: SamplingVector,
}

/// Optimization outcome: the best sampling vector, its budget and objective,
/// and the full diagnostic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub q_star: SamplingVector,
    pub m_star: f64,
    pub objective: f64,
    pub grid: Vec<GridPoint>,
}

impl OptimizerResult {
    /// Diagnostic grid as CSV with columns `M,objective,q_1..q_N`.
    pub fn grid_csv(&self) -> String {
        let n = self.q_star.len();
        let mut out = String::from("M,objective");
        for i in 1..=n {
            out.push_str(&format!(",q_{i}"));
        }
        out.push('\n');
        for gp in &self.grid {
            out.push_str(&format!("{},{}", gp.m, gp.objective));
            for &q in &gp.q.probs {
                out.push_str(&format!(",{q}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Raw per-client lower bounds `a_n^2 N / beta`.
fn raw_lower_bounds(consts: &ConvergenceConstants, model: &SystemModel) -> Vec<f64> {
    let n = model.len() as f64;
    model
        .data_weights
        .iter()
        .map(|&a| a * a * n / consts.beta)
        .collect()
}

/// Closed (slacked) lower bounds; errors if any raw bound reaches 1, in which
/// case no sampling vector can meet the threshold.
fn closed_lower_bounds(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    slack: f64,
) -> Result<Vec<f64>> {
    let raw = raw_lower_bounds(consts, model);
    for (i, &l) in raw.iter().enumerate() {
        if l >= 1.0 {
            return Err(Error::InfeasibleProblem(format!(
                "client at position {i} has sampling lower bound {l} >= 1; \
                 the convergence threshold is unreachable"
            )));
        }
    }
    Ok(raw.iter().map(|&l| (l * (1.0 + slack)).min(1.0)).collect())
}

/// True surrogate objective: predicted rounds times the linear per-round
/// cost. Errors if `q` leaves the feasible region (per-client lower bound or
/// penalty-sum cap).
pub fn p2_objective(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    q: &SamplingVector,
) -> Result<f64> {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    let raw = raw_lower_bounds(consts, model);
    for (i, (&qn, &l)) in q.probs.iter().zip(raw.iter()).enumerate() {
        if qn <= l {
            return Err(Error::InfeasibleSampling(format!(
                "q[{i}] = {qn} at or below its lower bound {l}"
            )));
        }
    }
    let rounds = predicted_rounds(consts, model, q)?;
    Ok(rounds * linear_round_time_bound(model, q))
}

/// Separable convex overestimate of the round-count factor:
/// `sum_n alpha q_n / (N beta q_n - a_n^2 N^2)`.
pub fn p3_surrogate(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    q: &SamplingVector,
) -> Result<f64> {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    let n = model.len() as f64;
    let mut acc = 0.0;
    for (i, (&a, &qn)) in model.data_weights.iter().zip(q.probs.iter()).enumerate() {
        let denom = n * consts.beta * qn - a * a * n * n;
        if denom <= 0.0 {
            return Err(Error::InfeasibleSampling(format!(
                "q[{i}] = {qn} at or below its lower bound {}",
                a * a * n / consts.beta
            )));
        }
        acc += consts.alpha * qn / denom;
    }
    Ok(acc)
}

/// Feasible interval for the per-round cost budget `M`: the analytic bracket
/// `[N min_n(l_n c_n), N max_n c_n]` intersected with the interval actually
/// reachable under the box constraints, `[sum_n l_n c_n, sum_n c_n]`.
pub fn m_bounds(consts: &ConvergenceConstants, model: &SystemModel) -> Result<(f64, f64)> {
    let raw = raw_lower_bounds(consts, model);
    for (i, &l) in raw.iter().enumerate() {
        if l >= 1.0 {
            return Err(Error::InfeasibleProblem(format!(
                "client at position {i} has sampling lower bound {l} >= 1"
            )));
        }
    }
    let c = cost_coefficients(model);
    let n = model.len() as f64;
    let bracket_lo = n
        * raw
            .iter()
            .zip(c.iter())
            .map(|(&l, &cn)| l * cn)
            .fold(f64::INFINITY, f64::min);
    let bracket_hi = n * c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reach_lo: f64 = raw.iter().zip(c.iter()).map(|(&l, &cn)| l * cn).sum();
    let reach_hi: f64 = c.iter().sum();
    let lo = bracket_lo.max(reach_lo);
    let hi = bracket_hi.min(reach_hi);
    if lo > hi {
        return Err(Error::InfeasibleProblem(format!(
            "empty budget interval: [{lo}, {hi}]"
        )));
    }
    Ok((lo, hi))
}

/// Water-filling solve of the fixed-budget convex problem: minimizes the
/// separable surrogate subject to `sum q_n c_n = M` and the box constraints.
pub fn solve_p3_fixed_m(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    m: f64,
    cfg: &OptimizerConfig,
) -> Result<SamplingVector> {
    cfg.validate()?;
    let n = model.len();
    let a = &model.data_weights;
    let c = cost_coefficients(model);
    let raw = raw_lower_bounds(consts, model);
    let lb = closed_lower_bounds(consts, model, cfg.lower_bound_slack)?;

    let reach_lo: f64 = lb.iter().zip(c.iter()).map(|(&l, &cn)| l * cn).sum();
    let reach_hi: f64 = c.iter().sum();
    let tol = cfg.kkt_tolerance * m.abs().max(f64::MIN_POSITIVE);
    if m < reach_lo - tol || m > reach_hi + tol {
        return Err(Error::InfeasibleM {
            m,
            lo: reach_lo,
            hi: reach_hi,
        });
    }
    // budget pinned at a box corner
    if m >= reach_hi - tol {
        return SamplingVector::new(vec![1.0; n]);
    }
    if m <= reach_lo + tol {
        return SamplingVector::new(lb);
    }

    let q_of = |lambda: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let free = raw[i] + a[i] / consts.beta * (consts.alpha / (lambda * c[i])).sqrt();
                free.clamp(lb[i], 1.0)
            })
            .collect()
    };
    let spend = |q: &[f64]| -> f64 { q.iter().zip(c.iter()).map(|(&qi, &ci)| qi * ci).sum() };

    // bracket the multiplier: spend is nonincreasing in lambda
    let mut lam_lo = 1.0;
    while spend(&q_of(lam_lo)) < m {
        lam_lo *= 0.25;
        assert!(lam_lo > 1e-300, "failed to bracket the KKT multiplier from below");
    }
    let mut lam_hi = 1.0;
    while spend(&q_of(lam_hi)) > m {
        lam_hi *= 4.0;
        assert!(lam_hi < 1e300, "failed to bracket the KKT multiplier from above");
    }

    let mut q = q_of((lam_lo * lam_hi).sqrt());
    for _ in 0..20_000 {
        let lam = (lam_lo * lam_hi).sqrt();
        q = q_of(lam);
        let r = spend(&q) - m;
        if r.abs() <= tol {
            break;
        }
        if r > 0.0 {
            lam_lo = lam;
        } else {
            lam_hi = lam;
        }
        if lam_hi - lam_lo <= f64::EPSILON * lam_hi {
            break;
        }
    }
    SamplingVector::new(q)
}

/// Full grid search: solves the fixed-budget problem at every grid point,
/// scores each candidate with the true objective [`p2_objective`], and
/// returns the argmin (ties broken toward the smaller budget).
pub fn optimize(
    consts: &ConvergenceConstants,
    model: &SystemModel,
    cfg: &OptimizerConfig,
) -> Result<OptimizerResult> {
    cfg.validate()?;
    let c = cost_coefficients(model);
    let lb = closed_lower_bounds(consts, model, cfg.lower_bound_slack)?;
    let lo: f64 = lb.iter().zip(c.iter()).map(|(&l, &cn)| l * cn).sum();
    let hi: f64 = c.iter().sum();
    let span = hi - lo;

    let ms: Vec<f64> = if span <= f64::EPSILON * hi.abs() {
        vec![lo]
    } else {
        (0..=cfg.m_grid_steps)
            .map(|i| lo + span * i as f64 / cfg.m_grid_steps as f64)
            .collect()
    };

    let grid: Vec<GridPoint> = ms
        .par_iter()
        .map(|&m| -> Result<GridPoint> {
            let q = solve_p3_fixed_m(consts, model, m, cfg)?;
            let objective = p2_objective(consts, model, &q)?;
            Ok(GridPoint { m, objective, q })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = grid
        .iter()
        .min_by(|a, b| {
            a.objective
                .partial_cmp(&b.objective)
                .expect("non-finite objective")
                .then(a.m.partial_cmp(&b.m).unwrap())
        })
        .expect("grid is never empty");

    Ok(OptimizerResult {
        q_star: best.q.clone(),
        m_star: best.m,
        objective: best.objective,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convergence::PilotStats;
    use crate::system::ClientProfile;
    use crate::timing::linear_round_time_bound;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn model_of(taus: &[f64], ts: &[f64], data: &[u64], f_tot: f64) -> SystemModel {
        let clients = taus
            .iter()
            .zip(ts.iter())
            .zip(data.iter())
            .enumerate()
            .map(|(i, ((&tau, &t), &d))| ClientProfile::new(i + 1, tau, t, d))
            .collect();
        SystemModel::new(clients, f_tot).unwrap()
    }

    fn consts_for(model: &SystemModel, r1: usize, r2: usize) -> ConvergenceConstants {
        let n = model.len();
        ConvergenceConstants::from_pilot(PilotStats {
            rounds_uniform: r1,
            rounds_full: r2,
            c_uniform: inv_prob_weight_sum(model, &SamplingVector::uniform(n)),
            c_full: inv_prob_weight_sum(model, &SamplingVector::full(n)),
        })
        .unwrap()
    }

    #[test]
    fn p2_at_full_sampling_is_r2_times_cost_sum() {
        let m = model_of(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[10, 20, 30], 5.0);
        let consts = consts_for(&m, 400, 100);
        let q = SamplingVector::full(3);
        let got = p2_objective(&consts, &m, &q).unwrap();
        let rounds = predicted_rounds(&consts, &m, &q).unwrap();
        let cost: f64 = cost_coefficients(&m).iter().sum();
        assert_abs_diff_eq!(got, rounds * cost, epsilon = 1e-9);
        // the fit passes through the full-sampling pilot point
        assert_abs_diff_eq!(rounds, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn p2_scales_comm_part_linearly() {
        let taus = [1.0, 2.0, 3.0];
        let ts = [2.0, 4.0, 6.0];
        let doubled: Vec<f64> = ts.iter().map(|t| t * 2.0).collect();
        let m1 = model_of(&taus, &ts, &[10, 20, 30], 5.0);
        let m2 = model_of(&taus, &doubled, &[10, 20, 30], 5.0);
        let consts = consts_for(&m1, 400, 100);
        let q = SamplingVector::new(vec![0.5, 0.6, 0.7]).unwrap();
        let rounds = predicted_rounds(&consts, &m1, &q).unwrap();
        let lin1 = linear_round_time_bound(&m1, &q);
        let lin2 = linear_round_time_bound(&m2, &q);
        let comm1: f64 = m1
            .clients
            .iter()
            .zip(q.probs.iter())
            .map(|(c, &qn)| qn * c.comm_time_unit_bw / 5.0)
            .sum();
        assert_abs_diff_eq!(lin2 - lin1, comm1, epsilon = 1e-12);
        assert_abs_diff_eq!(
            p2_objective(&consts, &m2, &q).unwrap(),
            rounds * lin2,
            epsilon = 1e-9
        );
    }

    #[test]
    fn p2_equals_product_of_the_two_factors() {
        let m = model_of(&[0.5, 1.5, 4.0], &[3.0, 1.0, 7.0], &[5, 25, 10], 8.0);
        let consts = consts_for(&m, 900, 120);
        let q = SamplingVector::new(vec![0.4, 0.9, 0.25]).unwrap();
        let got = p2_objective(&consts, &m, &q).unwrap();
        let expect =
            predicted_rounds(&consts, &m, &q).unwrap() * linear_round_time_bound(&m, &q);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12 * expect);
    }

    #[test]
    fn surrogate_dominates_harmonic_form() {
        let m = model_of(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[10, 30, 20, 40], 5.0);
        let consts = consts_for(&m, 500, 80);
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::MonteCarlo, &[]);
        let raw: Vec<f64> = m
            .data_weights
            .iter()
            .map(|&a| a * a * 4.0 / consts.beta)
            .collect();
        for _ in 0..200 {
            let probs: Vec<f64> = raw
                .iter()
                .map(|&l| rng.random_range((l * 1.01).min(1.0)..=1.0))
                .collect();
            let q = SamplingVector::new(probs).unwrap();
            let sur = p3_surrogate(&consts, &m, &q).unwrap();
            if let Ok(rounds) = predicted_rounds(&consts, &m, &q) {
                assert!(
                    sur >= rounds - 1e-9 * rounds.abs(),
                    "surrogate {sur} below exact {rounds}"
                );
            }
        }
    }

    #[test]
    fn surrogate_equality_in_symmetric_case() {
        // equal weights and equal q make every term coincide
        let m = model_of(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[10, 10, 10, 10], 5.0);
        let consts = consts_for(&m, 500, 80);
        let q = SamplingVector::new(vec![0.6; 4]).unwrap();
        let sur = p3_surrogate(&consts, &m, &q).unwrap();
        let exact = predicted_rounds(&consts, &m, &q).unwrap();
        assert_abs_diff_eq!(sur, exact, epsilon = 1e-9 * exact);
    }

    #[test]
    fn surrogate_matches_independent_sum() {
        let m = model_of(&[0.5, 1.0, 2.0, 3.0], &[1.0; 4], &[7, 13, 29, 51], 5.0);
        let consts = consts_for(&m, 700, 90);
        let q = SamplingVector::new(vec![0.3, 0.7, 0.5, 0.9]).unwrap();
        let n = 4.0;
        let mut expect = 0.0;
        for i in 0..4 {
            let a = m.data_weights[i];
            expect += consts.alpha * q.probs[i]
                / (n * consts.beta * q.probs[i] - a * a * n * n);
        }
        let got = p3_surrogate(&consts, &m, &q).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12 * expect);
    }

    // a one-client fleet cannot be pilot-fit (uniform == full), so build
    // constants directly
    fn hand_consts(alpha: f64, beta: f64) -> ConvergenceConstants {
        ConvergenceConstants {
            alpha,
            beta,
            pilot: PilotStats {
                rounds_uniform: 2,
                rounds_full: 1,
                c_uniform: 1.0,
                c_full: 0.5,
            },
        }
    }

    #[test]
    fn single_client_budget_forces_q() {
        let m = model_of(&[2.0], &[5.0], &[10], 10.0);
        let consts = hand_consts(50.0, 2.0);
        let c = cost_coefficients(&m)[0];
        let target_q = 0.63;
        let q =
            solve_p3_fixed_m(&consts, &m, target_q * c, &OptimizerConfig::default()).unwrap();
        assert_abs_diff_eq!(q.probs[0], target_q, epsilon = 1e-9);
    }

    #[test]
    fn symmetric_instance_splits_budget_evenly() {
        let m = model_of(&[2.0; 4], &[5.0; 4], &[10; 4], 10.0);
        let consts = consts_for(&m, 300, 60);
        let c = cost_coefficients(&m)[0];
        let target = 4.0 * 0.4 * c;
        let q = solve_p3_fixed_m(&consts, &m, target, &OptimizerConfig::default()).unwrap();
        for &qi in &q.probs {
            assert_abs_diff_eq!(qi, 0.4, epsilon = 1e-8);
        }
    }

    #[test]
    fn budget_residual_within_tolerance() {
        let m = model_of(&[0.5, 1.0, 3.0], &[2.0, 8.0, 3.0], &[30, 10, 60], 6.0);
        let consts = consts_for(&m, 800, 110);
        let cfg = OptimizerConfig::default();
        let (lo, hi) = m_bounds(&consts, &m).unwrap();
        for frac in [0.05, 0.3, 0.5, 0.8, 0.99] {
            let m_target = lo + (hi - lo) * frac;
            let q = solve_p3_fixed_m(&consts, &m, m_target, &cfg).unwrap();
            let spend: f64 = q
                .probs
                .iter()
                .zip(cost_coefficients(&m).iter())
                .map(|(&qi, &ci)| qi * ci)
                .sum();
            assert!(
                (spend - m_target).abs() <= cfg.kkt_tolerance * m_target * 1.01,
                "residual {} at M = {m_target}",
                (spend - m_target).abs()
            );
        }
    }

    #[test]
    fn infeasible_budget_rejected() {
        let m = model_of(&[1.0, 2.0], &[2.0, 2.0], &[10, 10], 4.0);
        let consts = consts_for(&m, 200, 50);
        let cfg = OptimizerConfig::default();
        let hi: f64 = cost_coefficients(&m).iter().sum();
        assert!(matches!(
            solve_p3_fixed_m(&consts, &m, hi * 1.5, &cfg),
            Err(Error::InfeasibleM { .. })
        ));
        assert!(matches!(
            solve_p3_fixed_m(&consts, &m, 1e-12, &cfg),
            Err(Error::InfeasibleM { .. })
        ));
    }

    #[test]
    fn m_bounds_plug_in_value() {
        // equal weights, beta = 1.99, N = 100: per-client lower bound
        // = (1/10000)*100/1.99 ~= 0.0050251
        let n = 100;
        let m = model_of(
            &(0..n).map(|i| 1.0 + i as f64 * 0.01).collect::<Vec<_>>(),
            &vec![2.0; n],
            &vec![10u64; n],
            10.0,
        );
        let consts = ConvergenceConstants::from_pilot(PilotStats {
            rounds_uniform: 200,
            rounds_full: 100,
            c_uniform: 1.0,
            c_full: 0.01,
        })
        .unwrap();
        assert_abs_diff_eq!(consts.beta, 1.99, epsilon = 1e-12);
        let lb = 0.0001 * 100.0 / 1.99;
        assert_abs_diff_eq!(lb, 0.005025125628140704, epsilon = 1e-12);
        let (lo, hi) = m_bounds(&consts, &m).unwrap();
        let c = cost_coefficients(&m);
        let expect_lo: f64 = c.iter().map(|&ci| lb * ci).sum();
        assert_abs_diff_eq!(lo, expect_lo, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, c.iter().sum::<f64>(), epsilon = 1e-9);
    }

    #[test]
    fn m_bounds_identical_clients_hit_analytic_max() {
        let m = model_of(&[2.0; 6], &[3.0; 6], &[10; 6], 6.0);
        let consts = consts_for(&m, 200, 50);
        let (_, hi) = m_bounds(&consts, &m).unwrap();
        let c = 3.0 / 6.0 + 2.0;
        // with identical clients the reachable max equals the bracket max N*c
        assert_abs_diff_eq!(hi, 6.0 * c, epsilon = 1e-12);
    }

    #[test]
    fn reachable_interval_inside_analytic_bracket() {
        let mut rng = crate::rng::stream_rng(77, crate::rng::Stream::MonteCarlo, &[]);
        for _ in 0..100 {
            let n = rng.random_range(2..9usize);
            let mut taus: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..4.0)).collect();
            taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..9.0)).collect();
            let data: Vec<u64> = (0..n).map(|_| rng.random_range(5..60u64)).collect();
            let m = model_of(&taus, &ts, &data, rng.random_range(2.0..20.0));
            let r2 = rng.random_range(20..100usize);
            let r1 = r2 * rng.random_range(2..8usize);
            let consts = consts_for(&m, r1, r2);
            if let Ok((lo, hi)) = m_bounds(&consts, &m) {
                let raw: Vec<f64> = m
                    .data_weights
                    .iter()
                    .map(|&a| a * a * n as f64 / consts.beta)
                    .collect();
                let c = cost_coefficients(&m);
                let bracket_lo = n as f64
                    * raw
                        .iter()
                        .zip(c.iter())
                        .map(|(&l, &ci)| l * ci)
                        .fold(f64::INFINITY, f64::min);
                let bracket_hi =
                    n as f64 * c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo >= bracket_lo - 1e-12 && hi <= bracket_hi + 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_problem_when_lower_bound_reaches_one() {
        // one client hoards nearly all data; small beta pushes its bound past 1
        let m = model_of(&[1.0, 2.0], &[2.0, 2.0], &[99, 1], 4.0);
        let consts = ConvergenceConstants {
            alpha: 50.0,
            beta: 1.0,
            pilot: PilotStats {
                rounds_uniform: 100,
                rounds_full: 50,
                c_uniform: 0.9,
                c_full: 0.5,
            },
        };
        assert!(matches!(
            m_bounds(&consts, &m),
            Err(Error::InfeasibleProblem(_))
        ));
        assert!(matches!(
            optimize(&consts, &m, &OptimizerConfig::default()),
            Err(Error::InfeasibleProblem(_))
        ));
    }

    #[test]
    fn kkt_conditions_hold_at_solution() {
        let m = model_of(
            &[0.4, 1.1, 2.2, 3.0, 4.5],
            &[6.0, 2.0, 9.0, 1.5, 4.0],
            &[40, 10, 25, 5, 20],
            7.0,
        );
        let consts = consts_for(&m, 900, 130);
        let cfg = OptimizerConfig::default();
        let (lo, hi) = m_bounds(&consts, &m).unwrap();
        let c = cost_coefficients(&m);
        let n = m.len() as f64;
        let raw: Vec<f64> = m
            .data_weights
            .iter()
            .map(|&a| a * a * n / consts.beta)
            .collect();
        for frac in [0.2, 0.5, 0.75] {
            let m_target = lo + (hi - lo) * frac;
            let q = solve_p3_fixed_m(&consts, &m, m_target, &cfg).unwrap();
            // marginal decrease rate per unit budget, independent recomputation
            let marginals: Vec<f64> = (0..m.len())
                .map(|i| {
                    let a = m.data_weights[i];
                    let denom = n * consts.beta * q.probs[i] - a * a * n * n;
                    consts.alpha * a * a * n * n / (denom * denom * c[i])
                })
                .collect();
            let unclipped: Vec<usize> = (0..m.len())
                .filter(|&i| {
                    q.probs[i] > raw[i] * (1.0 + cfg.lower_bound_slack) * (1.0 + 1e-9)
                        && q.probs[i] < 1.0 - 1e-12
                })
                .collect();
            if unclipped.len() >= 2 {
                let lam = marginals[unclipped[0]];
                for &i in &unclipped[1..] {
                    assert!(
                        (marginals[i] / lam - 1.0).abs() <= 1e-6,
                        "marginals differ on unclipped coords: {} vs {lam}",
                        marginals[i]
                    );
                }
                for i in 0..m.len() {
                    if q.probs[i] >= 1.0 - 1e-12 {
                        assert!(marginals[i] >= lam * (1.0 - 1e-6));
                    } else if !unclipped.contains(&i) {
                        assert!(marginals[i] <= lam * (1.0 + 1e-6));
                    }
                }
            }
        }
    }

    #[test]
    fn optimize_beats_reference_vectors() {
        let m = model_of(&[0.5, 2.0, 5.0], &[2.0, 10.0, 30.0], &[30, 40, 30], 5.0);
        let consts = consts_for(&m, 200, 90);
        let cfg = OptimizerConfig::default();
        let result = optimize(&consts, &m, &cfg).unwrap();
        let candidates = [
            SamplingVector::full(3),
            SamplingVector::uniform(3),
            SamplingVector::new(vec![0.2; 3]).unwrap(),
            SamplingVector::new(m.data_weights.clone()).unwrap(),
        ];
        for cand in &candidates {
            if let Ok(obj) = p2_objective(&consts, &m, cand) {
                assert!(
                    result.objective <= obj + 1e-9 * obj,
                    "optimizer {} worse than reference {obj}",
                    result.objective
                );
            }
        }
        // result invariants
        let spend: f64 = result
            .q_star
            .probs
            .iter()
            .zip(cost_coefficients(&m).iter())
            .map(|(&qi, &ci)| qi * ci)
            .sum();
        assert!((spend - result.m_star).abs() <= cfg.kkt_tolerance * result.m_star * 1.01);
    }

    #[test]
    fn grid_refinement_does_not_regress() {
        let m = model_of(&[0.5, 2.0, 5.0], &[2.0, 10.0, 30.0], &[30, 40, 30], 5.0);
        let consts = consts_for(&m, 600, 90);
        let coarse = optimize(&consts, &m, &OptimizerConfig { m_grid_steps: 200, ..Default::default() }).unwrap();
        let fine = optimize(&consts, &m, &OptimizerConfig { m_grid_steps: 2000, ..Default::default() }).unwrap();
        let local_variation = coarse
            .grid
            .windows(2)
            .map(|w| (w[0].objective - w[1].objective).abs())
            .fold(0.0, f64::max);
        assert!(
            fine.objective <= coarse.objective + local_variation,
            "fine {} vs coarse {} (variation {local_variation})",
            fine.objective,
            coarse.objective
        );
    }

    #[test]
    fn optimize_is_scale_consistent() {
        let taus = [0.5, 2.0, 5.0];
        let ts = [2.0, 10.0, 30.0];
        let k = 2.0;
        let m1 = model_of(&taus, &ts, &[30, 40, 30], 5.0);
        let scaled_taus: Vec<f64> = taus.iter().map(|t| t * k).collect();
        let scaled_ts: Vec<f64> = ts.iter().map(|t| t * k).collect();
        let m2 = model_of(&scaled_taus, &scaled_ts, &[30, 40, 30], 5.0);
        let consts = consts_for(&m1, 600, 90);
        let cfg = OptimizerConfig::default();
        let r1 = optimize(&consts, &m1, &cfg).unwrap();
        let r2 = optimize(&consts, &m2, &cfg).unwrap();
        assert_abs_diff_eq!(r2.m_star / r1.m_star, k, epsilon = 1e-9);
        for (a, b) in r1.q_star.probs.iter().zip(r2.q_star.probs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn degenerate_grid_single_point() {
        // beta barely above the full-sampling penalty pins the single
        // client's lower bound at ~1: the reachable span collapses and the
        // grid degenerates to one point
        let m = model_of(&[2.0], &[5.0], &[10], 10.0);
        let consts = hand_consts(50.0, 1.0 + 1e-12);
        let cfg = OptimizerConfig::default();
        let result = optimize(&consts, &m, &cfg).unwrap();
        assert_eq!(result.grid.len(), 1);
        assert_eq!(result.q_star.probs[0], 1.0);
    }

    #[test]
    fn grid_csv_shape() {
        let m = model_of(&[1.0, 2.0], &[2.0, 3.0], &[10, 10], 4.0);
        let consts = consts_for(&m, 200, 50);
        let result = optimize(
            &consts,
            &m,
            &OptimizerConfig {
                m_grid_steps: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let csv = result.grid_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "M,objective,q_1,q_2");
        assert_eq!(csv.lines().count(), 1 + result.grid.len());
    }
}
