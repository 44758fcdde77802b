//! Independently-sampled unbiased FedAvg over a simulated fleet.
//!
//! Each round: every client flips its own Bernoulli coin, participants run
//! local SGD from the current global model, the server aggregates the
//! inverse-probability-weighted updates, and the round's wall-clock duration
//! comes from the same-finish-time bandwidth allocation. Loss and the global
//! gradient norm are evaluated on the full data union (data-share weighted)
//! every round.
//!
//! Randomness is split into named streams (sampling / data order / init)
//! derived from the master seed, so runs with different sampling vectors
//! share identical data shuffling and can be compared pairwise. Per-client
//! data streams are keyed on (client id, round), which makes the trace
//! independent of intra-round scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{smoothed_losses, SMOOTH_WINDOW};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::sim::data::Dataset;
use crate::sim::task::LossModel;
use crate::system::{SamplingVector, SystemModel};
use crate::timing::{realized_round_time, RoundTiming};

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub local_iters: usize,
    pub batch: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            eta: 0.01,
            local_iters: 10,
            batch: 32,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.eta
            )));
        }
        if self.local_iters == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig(
                "local_iters and batch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Flat global model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<f64>,
}

/// One completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    /// 1-based round index.
    pub round: usize,
    /// Client ids that participated, ascending.
    pub participants: Vec<usize>,
    /// Realized round duration in seconds.
    pub duration: f64,
    /// Global loss after aggregation, data-share weighted over all clients.
    pub global_loss: f64,
    /// Squared norm of the full global gradient after aggregation.
    pub grad_norm_sq: f64,
    /// Held-out accuracy, when an evaluation split was supplied.
    pub eval_accuracy: Option<f64>,
}

/// Snapshot of the configuration a trace was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub task: String,
    pub seed: u64,
    pub eta: f64,
    pub local_iters: usize,
    pub batch: usize,
    pub n_clients: usize,
}

/// A full training run: per-round outcomes plus running wall-clock time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub outcomes: Vec<RoundOutcome>,
    pub cumulative_time: Vec<f64>,
    pub meta: TraceMeta,
    /// True when a stop target (not the round cap) ended the run.
    pub stopped_by_target: bool,
}

impl TrainingTrace {
    pub fn rounds(&self) -> usize {
        self.outcomes.len()
    }

    pub fn total_time(&self) -> f64 {
        self.cumulative_time.last().copied().unwrap_or(0.0)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.global_loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.outcomes.last().map(|o| o.global_loss)
    }

    /// CSV with columns `round,wallclock_s,cumulative_s,n_participants,loss,grad_norm_sq`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("round,wallclock_s,cumulative_s,n_participants,loss,grad_norm_sq\n");
        for (o, &cum) in self.outcomes.iter().zip(self.cumulative_time.iter()) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                o.round,
                o.duration,
                cum,
                o.participants.len(),
                o.global_loss,
                o.grad_norm_sq
            ));
        }
        out
    }
}

/// When to stop a run. The round cap always applies; any satisfied target
/// ends the run early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_rounds: usize,
    pub target_loss: Option<f64>,
    /// Target on the trailing-smoothed loss (window [`SMOOTH_WINDOW`]).
    pub target_smoothed_loss: Option<f64>,
    pub target_grad_norm_sq: Option<f64>,
    pub target_accuracy: Option<f64>,
}

impl StopRule {
    pub fn max_rounds(max_rounds: usize) -> Self {
        Self {
            max_rounds,
            target_loss: None,
            target_smoothed_loss: None,
            target_grad_norm_sq: None,
            target_accuracy: None,
        }
    }

    pub fn with_target_loss(mut self, loss: f64) -> Self {
        self.target_loss = Some(loss);
        self
    }

    pub fn with_target_smoothed_loss(mut self, loss: f64) -> Self {
        self.target_smoothed_loss = Some(loss);
        self
    }

    pub fn with_target_grad_norm_sq(mut self, xi: f64) -> Self {
        self.target_grad_norm_sq = Some(xi);
        self
    }

    pub fn with_target_accuracy(mut self, acc: f64) -> Self {
        self.target_accuracy = Some(acc);
        self
    }

    fn target_met(&self, recent_losses: &[f64], outcome: &RoundOutcome) -> bool {
        if let Some(t) = self.target_loss {
            if outcome.global_loss <= t {
                return true;
            }
        }
        if let Some(t) = self.target_smoothed_loss {
            let tail = &recent_losses[recent_losses.len().saturating_sub(SMOOTH_WINDOW)..];
            let smoothed = tail.iter().sum::<f64>() / tail.len() as f64;
            if smoothed <= t {
                return true;
            }
        }
        if let Some(t) = self.target_grad_norm_sq {
            if outcome.grad_norm_sq <= t {
                return true;
            }
        }
        if let (Some(t), Some(acc)) = (self.target_accuracy, outcome.eval_accuracy) {
            if acc >= t {
                return true;
            }
        }
        false
    }
}

/// Runs `local_iters` minibatch SGD steps from `params` on one client's data
/// and returns the accumulated gradient sum `g_n` (the local model delta is
/// `-eta * g_n`). The global state is not touched.
pub fn local_update(
    task: &dyn LossModel,
    client_data: &Dataset,
    params: &[f64],
    hyper: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let dim = task.param_len();
    let n = client_data.len();
    let batch = hyper.batch.min(n);
    let mut local = params.to_vec();
    let mut grad = vec![0.0; dim];
    let mut accum = vec![0.0; dim];
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.local_iters {
        if batch == n {
            task.grad(&local, client_data, &all, &mut grad);
        } else {
            let idx: Vec<usize> = rand::seq::index::sample(rng, n, batch).into_vec();
            task.grad(&local, client_data, &idx, &mut grad);
        }
        for ((l, a), g) in local.iter_mut().zip(accum.iter_mut()).zip(grad.iter()) {
            *l -= hyper.eta * g;
            *a += g;
        }
    }
    accum
}

/// Unbiased aggregation: `x - sum_n a_n (eta / q_n) g_n` over the sampled
/// contributions. Clients are folded in ascending id order so the result is
/// independent of how contributions were produced.
pub fn aggregate(
    x: &ModelState,
    contributions: &[(usize, Vec<f64>)],
    q: &SamplingVector,
    model: &SystemModel,
    eta: f64,
) -> ModelState {
    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by_key(|&i| contributions[i].0);
    let mut params = x.params.clone();
    for &ci in &order {
        let (id, ref g) = contributions[ci];
        let pos = model
            .index_of(id)
            .unwrap_or_else(|| panic!("contribution from unknown client {id}"));
        let scale = model.data_weights[pos] * eta / q.probs[pos];
        for (p, gi) in params.iter_mut().zip(g.iter()) {
            *p -= scale * gi;
        }
    }
    ModelState { params }
}

/// Data-share-weighted loss and squared global gradient norm over all
/// clients' data.
fn global_metrics(
    task: &dyn LossModel,
    params: &[f64],
    parts: &[Dataset],
    weights: &[f64],
    full_idx: &[Vec<usize>],
) -> (f64, f64) {
    let dim = task.param_len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for (i, part) in parts.iter().enumerate() {
        loss += weights[i] * task.loss(params, part, &full_idx[i]);
        task.grad(params, part, &full_idx[i], &mut buf);
        for (g, b) in grad.iter_mut().zip(buf.iter()) {
            *g += weights[i] * b;
        }
    }
    let norm_sq = grad.iter().map(|g| g * g).sum();
    (loss, norm_sq)
}

/// Runs independently-sampled FedAvg until the stop rule fires.
///
/// `client_data` must be parallel to `system.clients` (one partition per
/// client, fleet order). Deterministic for a given seed; participant local
/// updates run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    system: &SystemModel,
    q: &SamplingVector,
    task: &dyn LossModel,
    client_data: &[Dataset],
    hyper: &Hyperparams,
    stop: &StopRule,
    seed: u64,
    eval: Option<&Dataset>,
) -> Result<TrainingTrace> {
    hyper.validate()?;
    let n = system.len();
    assert_eq!(q.len(), n, "q length must match fleet size");
    assert_eq!(client_data.len(), n, "need one dataset per client");
    assert!(
        client_data.iter().all(|d| !d.is_empty()),
        "every client needs at least one sample"
    );

    let mut sampling_rng = stream_rng(seed, Stream::Sampling, &[]);
    let mut init_rng = stream_rng(seed, Stream::Init, &[]);
    let mut x = ModelState {
        params: task.init_params(&mut init_rng),
    };
    let full_idx: Vec<Vec<usize>> = client_data.iter().map(|d| (0..d.len()).collect()).collect();

    let mut outcomes: Vec<RoundOutcome> = Vec::new();
    let mut cumulative_time = Vec::new();
    let mut losses = Vec::new();
    let mut elapsed = 0.0;
    let mut stopped_by_target = false;

    for round in 1..=stop.max_rounds {
        let sampled: Vec<usize> = (0..n)
            .filter(|&i| sampling_rng.random::<f64>() < q.probs[i])
            .collect();

        let contributions: Vec<(usize, Vec<f64>)> = sampled
            .par_iter()
            .map(|&i| {
                let id = system.clients[i].id;
                let mut rng = stream_rng(seed, Stream::DataOrder, &[id as u64, round as u64]);
                let g = local_update(task, &client_data[i], &x.params, hyper, &mut rng);
                (id, g)
            })
            .collect();

        let ids: Vec<usize> = contributions.iter().map(|&(id, _)| id).collect();
        let timing: RoundTiming = realized_round_time(system, &ids);
        x = aggregate(&x, &contributions, q, system, hyper.eta);

        let (loss, grad_norm_sq) =
            global_metrics(task, &x.params, client_data, &system.data_weights, &full_idx);
        if !loss.is_finite() || !grad_norm_sq.is_finite() {
            return Err(Error::NonFinite { round });
        }
        let eval_accuracy = eval.and_then(|e| task.accuracy(&x.params, e));

        elapsed += timing.duration;
        losses.push(loss);
        let outcome = RoundOutcome {
            round,
            participants: timing.participants,
            duration: timing.duration,
            global_loss: loss,
            grad_norm_sq,
            eval_accuracy,
        };
        cumulative_time.push(elapsed);
        let met = stop.target_met(&losses, &outcome);
        outcomes.push(outcome);
        if met {
            stopped_by_target = true;
            break;
        }
    }

    Ok(TrainingTrace {
        outcomes,
        cumulative_time,
        meta: TraceMeta {
            task: "custom".to_string(),
            seed,
            eta: hyper.eta,
            local_iters: hyper.local_iters,
            batch: hyper.batch,
            n_clients: n,
        },
        stopped_by_target,
    })
}

/// Convenience: first 1-based round whose smoothed loss crosses `f_s`,
/// reading the trace the same way the constant estimator does.
pub fn smoothed_crossing(trace: &TrainingTrace, f_s: f64) -> Option<usize> {
    smoothed_losses(&trace.losses())
        .iter()
        .position(|&l| l <= f_s)
        .map(|i| i + 1)
}
