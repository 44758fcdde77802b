//! Datasets: a flat row-major feature matrix with integer labels, synthetic
//! generation, non-iid Dirichlet partitioning, and a loader for the common
//! idx binary image format.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::system::SystemModel;

/// Row-major sample matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs at least one feature and one class".into(),
            ));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::InvalidConfig(format!(
                "feature buffer length {} != {} samples x {} features",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Synthetic classification data: per-class Gaussian means scaled by
/// `class_sep`, isotropic noise, near-balanced classes.
pub fn synthetic_classification(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    class_sep: f64,
    noise: f64,
    seed: u64,
) -> Dataset {
    let mut rng = stream_rng(seed, Stream::Dataset, &[]);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..n_features)
                .map(|_| class_sep * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n_samples * n_features);
    for &y in &labels {
        for j in 0..n_features {
            features.push(means[y][j] + noise * std_normal.sample(&mut rng));
        }
    }
    Dataset {
        features,
        labels,
        num_features: n_features,
        num_classes: n_classes,
    }
}

/// Per-client sample counts. Uses the fleet's `data_size` fields verbatim
/// when they sum to the dataset size; otherwise apportions the dataset
/// proportionally to the data weights (largest remainder, at least one
/// sample each).
fn target_sizes(model: &SystemModel, total: usize) -> Vec<usize> {
    let wanted: u64 = model.clients.iter().map(|c| c.data_size).sum();
    if wanted == total as u64 {
        return model.clients.iter().map(|c| c.data_size as usize).collect();
    }
    let n = model.len();
    let mut sizes: Vec<usize> = Vec::with_capacity(n);
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut assigned = 0usize;
    for (i, &w) in model.data_weights.iter().enumerate() {
        let quota = w * total as f64;
        let base = quota.floor() as usize;
        sizes.push(base);
        assigned += base;
        fractions.push((i, quota - base as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut rest = total - assigned;
    for &(i, _) in fractions.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    // nobody may end up empty; steal from the largest holders
    for i in 0..n {
        if sizes[i] == 0 {
            let donor = (0..n).max_by_key(|&j| sizes[j]).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Splits the dataset into one subset per client (in fleet order), with
/// per-client label proportions drawn from a symmetric Dirichlet with the
/// given concentration. Every sample is assigned exactly once and each
/// client receives its configured share.
pub fn partition_dirichlet(
    data: &Dataset,
    model: &SystemModel,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "Dirichlet concentration {concentration} must be positive"
        )));
    }
    let n = model.len();
    if data.len() < n {
        return Err(Error::InvalidConfig(format!(
            "dataset of {} samples cannot give each of {n} clients at least one",
            data.len()
        )));
    }
    let sizes = target_sizes(model, data.len());
    let k = data.num_classes();
    let mut rng = stream_rng(seed, Stream::Partition, &[]);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..data.len() {
        pools[data.label(i)].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("bad Dirichlet concentration: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for &size in &sizes {
        // symmetric Dirichlet draw via normalized Gamma variates
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 {
            for p in &mut props {
                *p /= total;
            }
        } else {
            props = vec![1.0 / k as f64; k];
        }
        let mut indices = Vec::with_capacity(size);
        for _ in 0..size {
            let avail: f64 = (0..k)
                .filter(|&c| !pools[c].is_empty())
                .map(|c| props[c])
                .sum();
            let chosen = if avail > 0.0 {
                let mut u = rng.random::<f64>() * avail;
                let mut pick = None;
                for c in 0..k {
                    if pools[c].is_empty() {
                        continue;
                    }
                    u -= props[c];
                    if u <= 0.0 {
                        pick = Some(c);
                        break;
                    }
                }
                pick.unwrap_or_else(|| (0..k).rev().find(|&c| !pools[c].is_empty()).unwrap())
            } else {
                // this client's preferred classes ran dry; take what's left
                (0..k).find(|&c| !pools[c].is_empty()).unwrap()
            };
            indices.push(pools[chosen].pop().unwrap());
        }
        out.push(data.subset(&indices));
    }
    Ok(out)
}

/// Splits off a held-out fraction (e.g. for accuracy targets). Returns
/// `(train, heldout)`; the split is a seeded shuffle.
pub fn split_holdout(data: &Dataset, frac: f64, seed: u64) -> (Dataset, Dataset) {
    assert!((0.0..1.0).contains(&frac), "holdout fraction must be in [0, 1)");
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, &[]));
    let n_eval = ((data.len() as f64) * frac).round() as usize;
    let (eval_idx, train_idx) = idx.split_at(n_eval);
    (data.subset(train_idx), data.subset(eval_idx))
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::InvalidConfig("idx file truncated".into()))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Reads an idx3-ubyte image file; pixels normalized to `[0, 1]`. Returns
/// `(flat features, samples, features per sample)`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    if read_be_u32(&bytes, 0)? != 0x0000_0803 {
        return Err(Error::InvalidConfig(format!(
            "{} is not an idx3-ubyte image file",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let dim = rows * cols;
    let body = bytes
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::InvalidConfig("idx image file truncated".into()))?;
    let features = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((features, n, dim))
}

/// Reads an idx1-ubyte label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if read_be_u32(&bytes, 0)? != 0x0000_0801 {
        return Err(Error::InvalidConfig(format!(
            "{} is not an idx1-ubyte label file",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let body = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::InvalidConfig("idx label file truncated".into()))?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label idx pair as a dataset, optionally truncated.
pub fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
) -> Result<Dataset> {
    let (mut feats, n, dim) = load_idx_images(images)?;
    let mut labs = load_idx_labels(labels)?;
    if labs.len() != n {
        return Err(Error::InvalidConfig(format!(
            "idx pair mismatch: {n} images vs {} labels",
            labs.len()
        )));
    }
    if let Some(limit) = limit {
        let keep = limit.min(n);
        feats.truncate(keep * dim);
        labs.truncate(keep);
    }
    let num_classes = labs.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(feats, labs, dim, num_classes)
}
