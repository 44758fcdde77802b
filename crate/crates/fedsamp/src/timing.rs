//! Round-time model under same-finish-time bandwidth allocation.
//!
//! A synchronous round ends when the slowest participant finishes. Splitting
//! the shared bandwidth so that every participant finishes at the same
//! instant minimizes the round time; the resulting duration `T` solves
//!
//! ```text
//! sum_{n in S} t_n / (T - tau_n) = f_tot,   T > max_{n in S} tau_n
//! ```
//!
//! The left side is continuous and strictly decreasing from +inf to 0 on the
//! open interval, so the root is unique. This module provides the realized
//! solver, the closed-form expected straggler compute time, two upper bounds
//! on the expected round time, and a Monte-Carlo oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::system::{SamplingVector, SystemModel};
use rand::Rng;

/// Absolute bisection tolerance on the round duration, in seconds.
pub const ROUND_TIME_TOL: f64 = 1e-10;

/// One solved round: duration, participants (client ids, ascending), and the
/// bandwidth allocation that lets every participant finish exactly at
/// `duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub duration: f64,
    pub participants: Vec<usize>,
    pub allocations: Vec<f64>,
}

/// Solves the same-finish-time equation for an index set into `model.clients`.
///
/// Bisection brackets the root at `[max_tau + 1e-12, max_tau + 10 * sum_t / f_tot]`
/// (the upper offset doubled until the residual changes sign), runs to
/// [`ROUND_TIME_TOL`], then polishes with a few Newton steps so the bandwidth
/// residual reaches machine precision.
pub(crate) fn solve_round_time_indices(model: &SystemModel, indices: &[usize]) -> f64 {
    debug_assert!(!indices.is_empty());
    let f_tot = model.total_bandwidth;
    let mut max_tau = f64::NEG_INFINITY;
    let mut sum_t = 0.0;
    for &i in indices {
        let c = &model.clients[i];
        max_tau = max_tau.max(c.compute_time);
        sum_t += c.comm_time_unit_bw;
    }
    let residual = |t: f64| -> f64 {
        indices
            .iter()
            .map(|&i| {
                let c = &model.clients[i];
                c.comm_time_unit_bw / (t - c.compute_time)
            })
            .sum::<f64>()
            - f_tot
    };

    let mut lo = max_tau + 1e-12;
    if residual(lo) <= 0.0 {
        // root is within 1e-12 of max_tau, below the bracket floor
        return lo;
    }
    let mut off = 10.0 * sum_t / f_tot;
    while residual(max_tau + off) > 0.0 {
        off *= 2.0;
    }
    let mut hi = max_tau + off;
    while hi - lo > ROUND_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = 0.5 * (lo + hi);
    // Newton polish: drives the bandwidth residual from O(slope * tol) down
    // to machine precision without moving T outside the bracket meaningfully.
    for _ in 0..4 {
        let r = residual(t);
        if r.abs() <= 1e-13 * f_tot {
            break;
        }
        let slope: f64 = indices
            .iter()
            .map(|&i| {
                let c = &model.clients[i];
                -c.comm_time_unit_bw / (t - c.compute_time).powi(2)
            })
            .sum();
        let next = t - r / slope;
        if next > max_tau && next.is_finite() {
            t = next;
        } else {
            break;
        }
    }
    t
}

/// Realized round time and bandwidth allocation for a participant set
/// (client ids). The empty set yields duration 0 and no allocations.
///
/// Panics if an id is not in the fleet.
pub fn realized_round_time(model: &SystemModel, participants: &[usize]) -> RoundTiming {
    let mut ids: Vec<usize> = participants.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return RoundTiming {
            duration: 0.0,
            participants: Vec::new(),
            allocations: Vec::new(),
        };
    }
    let indices: Vec<usize> = ids
        .iter()
        .map(|&id| {
            model
                .index_of(id)
                .unwrap_or_else(|| panic!("client id {id} not in fleet"))
        })
        .collect();
    let duration = solve_round_time_indices(model, &indices);
    let allocations = indices
        .iter()
        .map(|&i| {
            let c = &model.clients[i];
            c.comm_time_unit_bw / (duration - c.compute_time)
        })
        .collect();
    RoundTiming {
        duration,
        participants: ids,
        allocations,
    }
}

/// Closed-form expected maximum compute time among participants.
///
/// Requires clients sorted ascending by compute time (a `SystemModel`
/// invariant). The client at sorted position `n` is the straggler exactly
/// when it participates and no later-sorted client does; the expectation sums
/// `tau_n * q_n * prod_{i>n} (1 - q_i)`, with the zero-participant event
/// contributing 0.
pub fn expected_max_tau(model: &SystemModel, q: &SamplingVector) -> f64 {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    let mut acc = 0.0;
    let mut none_later = 1.0;
    for (c, &qn) in model.clients.iter().zip(q.probs.iter()).rev() {
        acc += none_later * qn * c.compute_time;
        none_later *= 1.0 - qn;
    }
    acc
}

/// Upper bound on the expected round time: pooled communication time plus the
/// expected straggler compute time.
pub fn expected_round_time_bound(model: &SystemModel, q: &SamplingVector) -> f64 {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    let comm: f64 = model
        .clients
        .iter()
        .zip(q.probs.iter())
        .map(|(c, &qn)| qn * c.comm_time_unit_bw)
        .sum();
    comm / model.total_bandwidth + expected_max_tau(model, q)
}

/// Fully linear upper bound `sum_n q_n (t_n / f_tot + tau_n)`; the per-round
/// cost used inside the sampling optimizer.
pub fn linear_round_time_bound(model: &SystemModel, q: &SamplingVector) -> f64 {
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    model
        .clients
        .iter()
        .zip(q.probs.iter())
        .map(|(c, &qn)| qn * (c.comm_time_unit_bw / model.total_bandwidth + c.compute_time))
        .sum()
}

/// Per-client round-cost coefficients `c_n = t_n / f_tot + tau_n`.
pub fn cost_coefficients(model: &SystemModel) -> Vec<f64> {
    model
        .clients
        .iter()
        .map(|c| c.comm_time_unit_bw / model.total_bandwidth + c.compute_time)
        .collect()
}

/// Monte-Carlo estimate of the expected round time under independent
/// Bernoulli participation. Returns `(mean, standard error)`.
///
/// Each draw gets its own derived RNG, so draws can be evaluated in parallel;
/// the reduction runs in draw order, making the result independent of
/// scheduling.
pub fn monte_carlo_expected_round_time(
    model: &SystemModel,
    q: &SamplingVector,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    assert!(draws >= 1, "need at least one draw");
    assert_eq!(q.len(), model.len(), "q length must match fleet size");
    let samples: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(seed, Stream::MonteCarlo, &[d as u64]);
            let picked: Vec<usize> = (0..model.len())
                .filter(|&n| rng.random::<f64>() < q.probs[n])
                .collect();
            if picked.is_empty() {
                0.0
            } else {
                solve_round_time_indices(model, &picked)
            }
        })
        .collect();
    // Welford keeps the mean exact for constant sequences (stderr exactly 0).
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let k = (i + 1) as f64;
        let delta = x - mean;
        mean += delta / k;
        m2 += delta * (x - mean);
    }
    let stderr = if draws > 1 {
        (m2 / (draws as f64 - 1.0) / draws as f64).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}
