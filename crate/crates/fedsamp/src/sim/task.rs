//! Desk-scale learning tasks: multinomial logistic regression, a small MLP,
//! and a quadratic toy objective with a closed-form gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::sim::data::{load_idx_dataset, synthetic_classification, Dataset};
use crate::sim::runner::Hyperparams;

/// A differentiable objective over a dataset. `loss` and `grad` operate on
/// the sample subset given by `idx` and return means over that subset.
pub trait LossModel: Send + Sync {
    fn param_len(&self) -> usize;
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn loss(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> f64;
    /// Writes the mean gradient over `idx` into `out` (overwritten).
    fn grad(&self, params: &[f64], data: &Dataset, idx: &[usize], out: &mut [f64]);
    /// Classification accuracy on a dataset, if the task defines one.
    fn accuracy(&self, _params: &[f64], _data: &Dataset) -> Option<f64> {
        None
    }
}

/// Multinomial (softmax) logistic regression with bias. Parameters are
/// class-major rows of `num_features + 1` values, bias last.
#[derive(Debug, Clone, Copy)]
pub struct LogisticRegression {
    pub num_features: usize,
    pub num_classes: usize,
}

impl LogisticRegression {
    fn logits(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let stride = self.num_features + 1;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &params[k * stride..(k + 1) * stride];
            let mut acc = row[self.num_features];
            for (w, xi) in row[..self.num_features].iter().zip(x.iter()) {
                acc += w * xi;
            }
            *o = acc;
        }
    }
}

/// Numerically stable log-sum-exp.
fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl LossModel for LogisticRegression {
    fn param_len(&self) -> usize {
        self.num_classes * (self.num_features + 1)
    }

    fn init_params(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0; self.param_len()]
    }

    fn loss(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> f64 {
        let mut logits = vec![0.0; self.num_classes];
        let mut acc = 0.0;
        for &i in idx {
            self.logits(params, data.row(i), &mut logits);
            acc += log_sum_exp(&logits) - logits[data.label(i)];
        }
        acc / idx.len() as f64
    }

    fn grad(&self, params: &[f64], data: &Dataset, idx: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let stride = self.num_features + 1;
        let mut logits = vec![0.0; self.num_classes];
        let inv = 1.0 / idx.len() as f64;
        for &i in idx {
            let x = data.row(i);
            self.logits(params, x, &mut logits);
            let lse = log_sum_exp(&logits);
            for k in 0..self.num_classes {
                let p = (logits[k] - lse).exp();
                let d = (p - if k == data.label(i) { 1.0 } else { 0.0 }) * inv;
                let row = &mut out[k * stride..(k + 1) * stride];
                for (w, xi) in row[..self.num_features].iter_mut().zip(x.iter()) {
                    *w += d * xi;
                }
                row[self.num_features] += d;
            }
        }
    }

    fn accuracy(&self, params: &[f64], data: &Dataset) -> Option<f64> {
        if data.is_empty() {
            return Some(0.0);
        }
        let mut logits = vec![0.0; self.num_classes];
        let mut hits = 0usize;
        for i in 0..data.len() {
            self.logits(params, data.row(i), &mut logits);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if best == data.label(i) {
                hits += 1;
            }
        }
        Some(hits as f64 / data.len() as f64)
    }
}

/// One-hidden-layer tanh MLP. Parameter layout: `W1 (h x d) | b1 (h) |
/// W2 (K x h) | b2 (K)`, rows contiguous.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub num_features: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Mlp {
    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.num_features;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.num_classes * self.hidden;
        (w1, b1, w2)
    }

    fn forward(&self, params: &[f64], x: &[f64], hidden_act: &mut [f64], logits: &mut [f64]) {
        let (w1_end, b1_end, w2_end) = self.offsets();
        for h in 0..self.hidden {
            let row = &params[h * self.num_features..(h + 1) * self.num_features];
            let mut acc = params[w1_end + h];
            for (w, xi) in row.iter().zip(x.iter()) {
                acc += w * xi;
            }
            hidden_act[h] = acc.tanh();
        }
        for k in 0..self.num_classes {
            let row = &params[b1_end + k * self.hidden..b1_end + (k + 1) * self.hidden];
            let mut acc = params[w2_end + k];
            for (w, a) in row.iter().zip(hidden_act.iter()) {
                acc += w * a;
            }
            logits[k] = acc;
        }
    }
}

impl LossModel for Mlp {
    fn param_len(&self) -> usize {
        self.hidden * self.num_features + self.hidden + self.num_classes * self.hidden + self.num_classes
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (w1_end, b1_end, w2_end) = self.offsets();
        let mut params = vec![0.0; self.param_len()];
        let lim1 = (6.0 / (self.num_features + self.hidden) as f64).sqrt();
        for p in &mut params[..w1_end] {
            *p = rng.random_range(-lim1..lim1);
        }
        let lim2 = (6.0 / (self.hidden + self.num_classes) as f64).sqrt();
        for p in &mut params[b1_end..w2_end] {
            *p = rng.random_range(-lim2..lim2);
        }
        params
    }

    fn loss(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> f64 {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.num_classes];
        let mut acc = 0.0;
        for &i in idx {
            self.forward(params, data.row(i), &mut hidden, &mut logits);
            acc += log_sum_exp(&logits) - logits[data.label(i)];
        }
        acc / idx.len() as f64
    }

    fn grad(&self, params: &[f64], data: &Dataset, idx: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let (w1_end, b1_end, w2_end) = self.offsets();
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.num_classes];
        let mut dlogits = vec![0.0; self.num_classes];
        let mut dhidden = vec![0.0; self.hidden];
        let inv = 1.0 / idx.len() as f64;
        for &i in idx {
            let x = data.row(i);
            self.forward(params, x, &mut hidden, &mut logits);
            let lse = log_sum_exp(&logits);
            for k in 0..self.num_classes {
                dlogits[k] =
                    ((logits[k] - lse).exp() - if k == data.label(i) { 1.0 } else { 0.0 }) * inv;
            }
            dhidden.fill(0.0);
            for k in 0..self.num_classes {
                let d = dlogits[k];
                let row = &params[b1_end + k * self.hidden..b1_end + (k + 1) * self.hidden];
                let grow = &mut out[b1_end + k * self.hidden..b1_end + (k + 1) * self.hidden];
                for h in 0..self.hidden {
                    grow[h] += d * hidden[h];
                    dhidden[h] += d * row[h];
                }
                out[w2_end + k] += d;
            }
            for h in 0..self.hidden {
                let dz = dhidden[h] * (1.0 - hidden[h] * hidden[h]);
                let grow = &mut out[h * self.num_features..(h + 1) * self.num_features];
                for (g, xi) in grow.iter_mut().zip(x.iter()) {
                    *g += dz * xi;
                }
                out[w1_end + h] += dz;
            }
        }
    }

    fn accuracy(&self, params: &[f64], data: &Dataset) -> Option<f64> {
        if data.is_empty() {
            return Some(0.0);
        }
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.num_classes];
        let mut hits = 0usize;
        for i in 0..data.len() {
            self.forward(params, data.row(i), &mut hidden, &mut logits);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if best == data.label(i) {
                hits += 1;
            }
        }
        Some(hits as f64 / data.len() as f64)
    }
}

/// Convex toy objective: each sample is a target point `b_i` and the loss is
/// the mean squared distance `mean_i |x - b_i|^2`. Gradient in closed form.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub dim: usize,
}

impl LossModel for Quadratic {
    fn param_len(&self) -> usize {
        self.dim
    }

    fn init_params(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn loss(&self, params: &[f64], data: &Dataset, idx: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &i in idx {
            for (p, b) in params.iter().zip(data.row(i).iter()) {
                acc += (p - b) * (p - b);
            }
        }
        acc / idx.len() as f64
    }

    fn grad(&self, params: &[f64], data: &Dataset, idx: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let inv = 1.0 / idx.len() as f64;
        for &i in idx {
            for (g, (p, b)) in out.iter_mut().zip(params.iter().zip(data.row(i).iter())) {
                *g += 2.0 * (p - b) * inv;
            }
        }
    }
}

/// Which learning task to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Logistic,
    Mlp { hidden: usize },
    Quadratic,
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// Generated per-class Gaussian clusters sized to the fleet.
    Synthetic,
    /// An idx-format image/label pair on disk.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
}

/// Complete task description: model kind, data shape, SGD hyperparameters,
/// and the non-iid partition concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_sep: f64,
    pub noise: f64,
    pub concentration: f64,
    pub hyper: Hyperparams,
    pub source: DatasetSource,
}

impl TaskSpec {
    /// A synthetic logistic-regression task with library defaults.
    pub fn logistic_default() -> Self {
        Self {
            kind: TaskKind::Logistic,
            num_features: 10,
            num_classes: 5,
            class_sep: 2.0,
            noise: 1.0,
            concentration: 0.8,
            hyper: Hyperparams::default(),
            source: DatasetSource::Synthetic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "task needs at least one feature and one class".into(),
            ));
        }
        if let TaskKind::Mlp { hidden } = self.kind {
            if hidden == 0 {
                return Err(Error::InvalidConfig("mlp hidden width must be >= 1".into()));
            }
        }
        if !(self.concentration > 0.0) {
            return Err(Error::InvalidConfig(
                "Dirichlet concentration must be positive".into(),
            ));
        }
        self.hyper.validate()
    }

    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::Logistic => "logistic".to_string(),
            TaskKind::Mlp { hidden } => format!("mlp{hidden}"),
            TaskKind::Quadratic => "quadratic".to_string(),
        }
    }

    /// Instantiates the loss model.
    pub fn build_model(&self) -> Box<dyn LossModel> {
        match self.kind {
            TaskKind::Logistic => Box::new(LogisticRegression {
                num_features: self.num_features,
                num_classes: self.num_classes,
            }),
            TaskKind::Mlp { hidden } => Box::new(Mlp {
                num_features: self.num_features,
                hidden,
                num_classes: self.num_classes,
            }),
            TaskKind::Quadratic => Box::new(Quadratic {
                dim: self.num_features,
            }),
        }
    }

    /// Produces the training dataset: synthetic data is sized to `total`,
    /// file-backed data is loaded as-is.
    pub fn build_dataset(&self, total: usize, seed: u64) -> Result<Dataset> {
        match &self.source {
            DatasetSource::Synthetic => Ok(synthetic_classification(
                total,
                self.num_features,
                self.num_classes,
                self.class_sep,
                self.noise,
                seed,
            )),
            DatasetSource::Idx {
                images,
                labels,
                limit,
            } => load_idx_dataset(images, labels, *limit),
        }
    }
}
